//! Label-based and instance-based metrics on a hand-made prediction table,
//! plus box IoU and the confidence/IoU correlation used for localization.

use ndarray::array;
use sspnet::datamodel::BoundingBox;
use sspnet::metrics::{example_based, iou, mean_accuracy, pcc};

fn main() -> sspnet::Result<()> {
    let probs = array![
        [0.9, 0.2, 0.7, 0.4],
        [0.6, 0.1, 0.3, 0.8],
        [0.2, 0.7, 0.5, 0.1],
        [0.1, 0.4, 0.9, 0.6],
    ];
    let labels = array![
        [1.0, 0.0, 1.0, 0.0],
        [1.0, 0.0, 0.0, 1.0],
        [0.0, 1.0, 0.0, 0.0],
        [0.0, 0.0, 1.0, 0.0],
    ];
    let ma = mean_accuracy(&probs.view(), &labels.view(), 0.5)?;
    println!("mA {:.4}", ma.mean);
    for (j, v) in ma.per_attribute.iter().enumerate() {
        println!("  attribute {j}: {v:?}");
    }
    let ex = example_based(&probs.view(), &labels.view(), 0.5)?;
    println!("accu {:.4} prec {:.4} rec {:.4} f1 {:.4}", ex.accu, ex.prec, ex.rec, ex.f1);

    let gt = BoundingBox::new(10, 4, 30, 20);
    for pred in [BoundingBox::new(10, 4, 30, 20), BoundingBox::new(15, 8, 35, 24), BoundingBox::new(40, 40, 44, 44)] {
        println!("IoU {:?} vs gt: {:.4}", pred, iou(&pred, &gt));
    }

    let confidence = [0.95, 0.8, 0.7, 0.4, 0.2];
    let ious = [0.6, 0.5, 0.45, 0.2, 0.05];
    println!("PCC(confidence, IoU) {:.4}", pcc(&confidence, &ious)?);
    Ok(())
}
