//! Generates the standard synthetic dataset, prints per-attribute positive
//! rates and writes it as a manifest with PNG images.
//!
//! `cargo run --release --example synth_gen -- [out_dir] [num_samples]`

use sspnet::datamodel::{generate_synthetic, save_manifest, SyntheticSpec};

fn main() -> sspnet::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let out = args.first().map(String::as_str).unwrap_or("synthetic");
    let n: usize = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(200);

    let data = generate_synthetic(&SyntheticSpec::standard(n), 0)?;
    let labels = data.label_matrix();
    for (j, name) in data.schema.attributes.iter().enumerate() {
        let group = data.schema.group_of(j).unwrap();
        let rate = labels.column(j).mean().unwrap();
        println!("{name:<12} {group:<7} positive rate {rate:.3}");
    }
    let boxes: usize = data.samples.iter().map(|s| s.gt_boxes.len()).sum();
    println!("{} samples, {boxes} ground-truth boxes", data.len());

    let path = save_manifest(&data, out, "test.jsonl")?;
    std::fs::write(format!("{out}/schema.json"), data.schema.to_json()).expect("write schema");
    println!("wrote {}", path.display());
    Ok(())
}
