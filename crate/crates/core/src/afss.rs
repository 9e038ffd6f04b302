//! Adaptive feature-scale selection.
//!
//! During the search phase every selection unit (an attribute group, or a
//! single attribute in per-attribute mode) is evaluated on all three pyramid
//! levels once per round. `freeze` then fixes, per unit, the level with the
//! highest mean mA; ties go to the finer level.

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Level;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMode {
    Searching,
    Frozen,
}

/// Compensated running mean.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct RunningMean {
    sum: f64,
    compensation: f64,
    count: u64,
}

impl RunningMean {
    pub fn push(&mut self, value: f64) {
        // Neumaier summation
        let t = self.sum + value;
        if self.sum.abs() >= value.abs() {
            self.compensation += (self.sum - t) + value;
        } else {
            self.compensation += (value - t) + self.sum;
        }
        self.sum = t;
        self.count += 1;
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    pub fn mean(&self) -> Option<f64> {
        (self.count > 0).then(|| (self.sum + self.compensation) / self.count as f64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleSelectionState {
    stats: IndexMap<String, [RunningMean; 3]>,
    frozen: Option<IndexMap<String, Level>>,
}

impl ScaleSelectionState {
    pub fn new<S: Into<String>>(units: impl IntoIterator<Item = S>) -> Self {
        Self {
            stats: units
                .into_iter()
                .map(|u| (u.into(), [RunningMean::default(); 3]))
                .collect(),
            frozen: None,
        }
    }

    /// A state that skips the search and fixes the given choices.
    pub fn fixed<S: Into<String>>(choices: impl IntoIterator<Item = (S, Level)>) -> Self {
        let frozen: IndexMap<String, Level> =
            choices.into_iter().map(|(u, l)| (u.into(), l)).collect();
        Self {
            stats: frozen
                .keys()
                .map(|u| (u.clone(), [RunningMean::default(); 3]))
                .collect(),
            frozen: Some(frozen),
        }
    }

    pub fn mode(&self) -> SelectionMode {
        if self.frozen.is_some() {
            SelectionMode::Frozen
        } else {
            SelectionMode::Searching
        }
    }

    pub fn units(&self) -> impl Iterator<Item = &str> {
        self.stats.keys().map(String::as_str)
    }

    pub fn stat(&self, unit: &str, level: Level) -> Option<f64> {
        self.stats.get(unit)?[level.index()].mean()
    }

    pub fn count(&self, unit: &str, level: Level) -> u64 {
        self.stats
            .get(unit)
            .map(|s| s[level.index()].count())
            .unwrap_or(0)
    }

    pub fn frozen(&self) -> Option<&IndexMap<String, Level>> {
        self.frozen.as_ref()
    }

    /// Folds one evaluation round of `unit` at `level` into its mean.
    pub fn record_round(&mut self, unit: &str, level: Level, ma: f64) -> Result<()> {
        if self.frozen.is_some() {
            return Err(Error::State(format!(
                "cannot record {unit}/{level}: selection is frozen"
            )));
        }
        if !(0.0..=1.0).contains(&ma) {
            return Err(Error::Validation(format!("mA {ma} outside [0, 1]")));
        }
        let stats = self
            .stats
            .get_mut(unit)
            .ok_or_else(|| Error::State(format!("unknown selection unit {unit}")))?;
        stats[level.index()].push(ma);
        Ok(())
    }

    /// Fixes the argmax level for every unit.
    pub fn freeze(&mut self) -> Result<&IndexMap<String, Level>> {
        if self.frozen.is_some() {
            return Err(Error::State("selection is already frozen".into()));
        }
        let missing: Vec<String> = self
            .stats
            .iter()
            .flat_map(|(u, s)| {
                Level::ALL
                    .into_iter()
                    .filter(|l| s[l.index()].count() == 0)
                    .map(move |l| format!("{u}/{l}"))
            })
            .collect();
        if !missing.is_empty() {
            return Err(Error::IncompleteSearch(missing));
        }
        let choices = self
            .stats
            .iter()
            .map(|(u, s)| {
                let mut best = Level::P1;
                let mut best_val = s[0].mean().unwrap();
                for level in [Level::P2, Level::P3] {
                    let v = s[level.index()].mean().unwrap();
                    if v > best_val {
                        best = level;
                        best_val = v;
                    }
                }
                (u.clone(), best)
            })
            .collect();
        Ok(self.frozen.insert(choices))
    }

    /// The frozen level for `unit`, or `override_level` while searching.
    pub fn select(&self, unit: &str, override_level: Option<Level>) -> Result<Level> {
        match &self.frozen {
            Some(f) => f
                .get(unit)
                .copied()
                .ok_or_else(|| Error::State(format!("unknown selection unit {unit}"))),
            None => override_level.ok_or_else(|| {
                Error::State(format!(
                    "scale for {unit} requested while still searching and no override given"
                ))
            }),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn running_mean_of_one_and_two_rounds() {
        let mut s = ScaleSelectionState::new(["Head"]);
        s.record_round("Head", Level::P1, 0.8).unwrap();
        assert_eq!(s.stat("Head", Level::P1), Some(0.8));
        assert_eq!(s.count("Head", Level::P1), 1);
        s.record_round("Head", Level::P1, 0.6).unwrap();
        assert!((s.stat("Head", Level::P1).unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(s.count("Head", Level::P1), 2);
    }

    #[test]
    fn recording_after_freeze_fails() {
        let mut s = ScaleSelectionState::new(["Head"]);
        for l in Level::ALL {
            s.record_round("Head", l, 0.5).unwrap();
        }
        s.freeze().unwrap();
        assert!(matches!(s.record_round("Head", Level::P1, 0.5), Err(Error::State(_))));
    }

    #[test]
    fn freeze_reports_missing_pairs() {
        let mut s = ScaleSelectionState::new(["Head", "All"]);
        s.record_round("Head", Level::P1, 0.5).unwrap();
        match s.freeze() {
            Err(Error::IncompleteSearch(missing)) => {
                assert!(missing.contains(&"Head/P2".to_string()));
                assert!(missing.contains(&"All/P1".to_string()));
                assert_eq!(missing.len(), 5);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn ties_go_to_the_finest_level() {
        let mut s = ScaleSelectionState::new(["Torso"]);
        for l in Level::ALL {
            s.record_round("Torso", l, 0.5).unwrap();
        }
        s.freeze().unwrap();
        assert_eq!(s.select("Torso", None).unwrap(), Level::P1);
    }

    #[test]
    fn select_needs_override_while_searching() {
        let s = ScaleSelectionState::new(["Head"]);
        assert!(matches!(s.select("Head", None), Err(Error::State(_))));
        assert_eq!(s.select("Head", Some(Level::P2)).unwrap(), Level::P2);
    }

    #[test]
    fn out_of_range_ma_is_rejected() {
        let mut s = ScaleSelectionState::new(["Head"]);
        assert!(s.record_round("Head", Level::P1, 1.5).is_err());
    }
}
