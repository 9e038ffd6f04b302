//! Trains SSPNet-R and the global-feature baseline on the standard
//! synthetic dataset and compares their test metrics.
//!
//! `cargo run --release --example train_region -- [epochs]`

use sspnet::datamodel::{generate_synthetic, Split, SyntheticSpec};
use sspnet::model::Architecture;
use sspnet::trainer::{evaluate, train_with, TrainConfig};

fn main() -> sspnet::Result<()> {
    let epochs: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(6);
    let data = generate_synthetic(&SyntheticSpec::standard(1400), 11)?;
    let (train, rest) = data.split_at(1000, Split::Train, Split::Val);
    let (val, test) = rest.split_at(200, Split::Val, Split::Test);

    for architecture in [Architecture::Ssp, Architecture::Global] {
        let config = TrainConfig {
            epochs,
            search_epochs: (epochs / 3).max(1),
            learning_rate: 1e-3,
            architecture,
            ..TrainConfig::default()
        };
        let ck = train_with(&config, &train, &val, |log| {
            println!("  epoch {:>2} {:?} loss {:.4}", log.epoch, log.phase, log.total_loss);
        })?;
        let report = evaluate(&ck.model, &test, config.threshold)?;
        println!("{architecture:?}:\n{}", report.to_table());
        if let Some(levels) = ck.model.selection.frozen() {
            println!("selected levels {levels:?}");
        }
    }
    Ok(())
}
