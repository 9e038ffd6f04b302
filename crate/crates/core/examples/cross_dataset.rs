//! Trains on one synthetic dataset and scores the attributes it shares with
//! a second dataset that uses different names and ordering.

use sspnet::datamodel::{generate_synthetic, Split, SyntheticSpec};
use sspnet::trainer::{cross_dataset_eval, train, TrainConfig};

fn main() -> sspnet::Result<()> {
    let source = generate_synthetic(&SyntheticSpec::standard(900), 1)?;
    let (train_set, val) = source.split_at(700, Split::Train, Split::Val);
    let config = TrainConfig {
        epochs: 5,
        search_epochs: 2,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let ck = train(&config, &train_set, &val)?;

    // the target renames two attributes and keeps only a subset, reordered
    let mut spec = SyntheticSpec::standard(300);
    let keep = ["LongCoat", "Hat", "Boots", "Glasses"];
    spec.attributes = keep
        .iter()
        .map(|k| spec.attributes.iter().find(|a| a.name == *k).unwrap().clone())
        .collect();
    spec.attributes[0].name = "Coat".into();
    spec.attributes[2].name = "Footwear".into();
    let target = generate_synthetic(&spec, 2)?;

    let pairs: Vec<(usize, usize)> = [("LongCoat", "Coat"), ("Hat", "Hat"), ("Boots", "Footwear"), ("Glasses", "Glasses")]
        .iter()
        .map(|(src, dst)| {
            (
                ck.model.schema.attribute_index(src).unwrap(),
                target.schema.attribute_index(dst).unwrap(),
            )
        })
        .collect();
    let report = cross_dataset_eval(&ck.model, &target, &pairs)?;
    print!("{}", report.to_table());
    Ok(())
}
