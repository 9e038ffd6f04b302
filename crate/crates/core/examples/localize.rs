//! Trains a small SSPNet-R, localizes attributes with pixel-level gradient
//! maps and writes overlays for a few test images.
//!
//! `cargo run --release --example localize -- [out_dir]`

use sspnet::datamodel::{generate_synthetic, Split, SyntheticSpec};
use sspnet::localization::{evaluate_localization, localize_with_heatmaps, render_overlay};
use sspnet::metrics::iou;
use sspnet::trainer::{train, TrainConfig};

fn main() -> sspnet::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "overlays".into());
    std::fs::create_dir_all(&out).expect("create output dir");
    let data = generate_synthetic(&SyntheticSpec::standard(1300), 11)?;
    let (train_set, rest) = data.split_at(1000, Split::Train, Split::Val);
    let (val, test) = rest.split_at(200, Split::Val, Split::Test);
    let config = TrainConfig {
        epochs: 8,
        search_epochs: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let ck = train(&config, &train_set, &val)?;

    for report in evaluate_localization(&ck.model, &test, &[0.3, 0.5, 0.7])? {
        println!("tau {:.1}: mean IoU {:.4}, mean PCC {:?}", report.tau, report.mean_iou, report.mean_pcc);
    }

    for (i, sample) in test.samples.iter().take(4).enumerate() {
        let attrs: Vec<usize> = sample.gt_boxes.keys().copied().collect();
        let (maps, located) = localize_with_heatmaps(&ck.model, sample, &attrs, &[0.5])?;
        for (heat, (&j, loc)) in maps.iter().zip(&located[0]) {
            let name = &test.schema.attributes[j];
            let score = loc.bbox.map_or(0.0, |b| iou(&b, &sample.gt_boxes[&j]));
            println!("image {i} {name:<12} confidence {:.3} IoU {score:.3}", loc.confidence);
            let img = render_overlay(&sample.image.view(), &heat.upsampled.view(), loc.bbox);
            img.save(format!("{out}/{i:02}_{name}.png")).expect("write overlay");
        }
    }
    Ok(())
}
