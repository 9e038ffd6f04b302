//! Adaptive feature-scale selection: freezing a hand-filled statistics table,
//! then watching a short search pick levels on real training data.

use sspnet::afss::ScaleSelectionState;
use sspnet::datamodel::{generate_synthetic, Split, SyntheticSpec};
use sspnet::trainer::{train, TrainConfig};
use sspnet::Level;

fn main() -> sspnet::Result<()> {
    let mut state = ScaleSelectionState::new(["Head", "Torso", "Bottom", "All"]);
    let rounds = [
        ("Head", [0.80, 0.79, 0.79]),
        ("Torso", [0.87, 0.88, 0.87]),
        ("Bottom", [0.80, 0.80, 0.80]),
        ("All", [0.80, 0.80, 0.81]),
    ];
    for (unit, values) in rounds {
        for level in Level::ALL {
            state.record_round(unit, level, values[level.index()])?;
        }
    }
    // Bottom ties on every level and falls to the finest one
    println!("frozen from table: {:?}", state.freeze()?);

    let data = generate_synthetic(&SyntheticSpec::standard(900), 3)?;
    let (train_set, val) = data.split_at(700, Split::Train, Split::Val);
    let config = TrainConfig {
        epochs: 4,
        search_epochs: 3,
        learning_rate: 1e-3,
        ..TrainConfig::default()
    };
    let ck = train(&config, &train_set, &val)?;
    let sel = &ck.model.selection;
    println!("{:<8} {:>7} {:>7} {:>7}", "unit", "P1", "P2", "P3");
    for unit in sel.units() {
        let cells: Vec<String> = Level::ALL
            .iter()
            .map(|&l| format!("{:>7.4}", sel.stat(unit, l).unwrap_or(f64::NAN)))
            .collect();
        println!("{unit:<8} {}  -> {}", cells.join(" "), sel.frozen().unwrap()[unit]);
    }
    Ok(())
}
