use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Level;

pub const NUM_KEYPOINTS: usize = 16;

/// Spatial attribute group. Declaration order is the reporting order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Group {
    Head,
    Torso,
    Bottom,
    All,
}

impl Group {
    pub const ALL: [Group; 4] = [Group::Head, Group::Torso, Group::Bottom, Group::All];

    pub fn name(self) -> &'static str {
        match self {
            Group::Head => "Head",
            Group::Torso => "Torso",
            Group::Bottom => "Bottom",
            Group::All => "All",
        }
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Group {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Group::ALL
            .into_iter()
            .find(|g| g.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::Validation(format!("unknown group {s:?}")))
    }
}

/// Vertical band of a feature map, as fractions of its height.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct PriorRegion {
    pub top: f64,
    pub bottom: f64,
}

impl From<[f64; 2]> for PriorRegion {
    fn from([top, bottom]: [f64; 2]) -> Self {
        Self { top, bottom }
    }
}

impl From<PriorRegion> for [f64; 2] {
    fn from(r: PriorRegion) -> Self {
        [r.top, r.bottom]
    }
}

impl PriorRegion {
    pub const FULL: PriorRegion = PriorRegion {
        top: 0.0,
        bottom: 1.0,
    };

    pub fn new(top: f64, bottom: f64) -> Self {
        Self { top, bottom }
    }

    /// Half-open row range `[round(top*h), round(bottom*h))`.
    pub fn rows(&self, height: usize) -> std::ops::Range<usize> {
        let start = (self.top * height as f64).round() as usize;
        let end = (self.bottom * height as f64).round() as usize;
        start.min(height)..end.min(height)
    }

    pub fn is_valid(&self) -> bool {
        self.top.is_finite()
            && self.bottom.is_finite()
            && 0.0 <= self.top
            && self.top < self.bottom
            && self.bottom <= 1.0
    }
}

/// Attribute names, their partition into spatial groups, and the per-group
/// spatial priors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributeSchema {
    pub attributes: Vec<String>,
    pub groups: IndexMap<Group, Vec<usize>>,
    pub prior_regions: IndexMap<Group, PriorRegion>,
    #[serde(default)]
    pub keypoint_groups: IndexMap<Group, Vec<usize>>,
    /// Network input size as `[height, width]`.
    #[serde(default = "default_input_size")]
    pub input_size: [usize; 2],
}

fn default_input_size() -> [usize; 2] {
    [256, 192]
}

const PA100K_ATTRIBUTES: [&str; 26] = [
    "Female",
    "AgeOver60",
    "Age18-60",
    "AgeLess18",
    "Front",
    "Side",
    "Back",
    "Hat",
    "Glasses",
    "HandBag",
    "ShoulderBag",
    "Backpack",
    "HoldObjectsInFront",
    "ShortSleeve",
    "LongSleeve",
    "UpperStride",
    "UpperLogo",
    "UpperPlaid",
    "UpperSplice",
    "LowerStripe",
    "LowerPattern",
    "LongCoat",
    "Trousers",
    "Shorts",
    "Skirt&Dress",
    "Boots",
];

impl AttributeSchema {
    /// The 26-attribute pedestrian schema with the stock grouping, band
    /// priors (in 64ths of the stride-4 map height) and keypoint sets.
    pub fn pa100k() -> Self {
        let attributes: Vec<String> = PA100K_ATTRIBUTES.iter().map(|s| s.to_string()).collect();
        let idx = |names: &[&str]| -> Vec<usize> {
            names
                .iter()
                .map(|n| PA100K_ATTRIBUTES.iter().position(|a| a == n).unwrap())
                .collect()
        };
        let mut groups = IndexMap::new();
        groups.insert(Group::Head, idx(&["Hat", "Glasses"]));
        groups.insert(
            Group::Torso,
            idx(&[
                "ShortSleeve",
                "LongSleeve",
                "UpperStride",
                "UpperLogo",
                "UpperPlaid",
                "UpperSplice",
                "Backpack",
            ]),
        );
        groups.insert(
            Group::Bottom,
            idx(&["LowerStripe", "LowerPattern", "Trousers", "Shorts", "Boots"]),
        );
        groups.insert(
            Group::All,
            idx(&[
                "LongCoat",
                "Skirt&Dress",
                "HandBag",
                "ShoulderBag",
                "HoldObjectsInFront",
                "AgeOver60",
                "Age18-60",
                "AgeLess18",
                "Female",
                "Front",
                "Side",
                "Back",
            ]),
        );
        Self {
            attributes,
            groups,
            prior_regions: default_prior_regions(),
            keypoint_groups: default_keypoint_groups(),
            input_size: default_input_size(),
        }
    }

    pub fn num_attributes(&self) -> usize {
        self.attributes.len()
    }

    pub fn group_names(&self) -> impl Iterator<Item = Group> + '_ {
        self.groups.keys().copied()
    }

    pub fn group_of(&self, attribute: usize) -> Option<Group> {
        self.groups
            .iter()
            .find(|(_, members)| members.contains(&attribute))
            .map(|(g, _)| *g)
    }

    pub fn attribute_index(&self, name: &str) -> Option<usize> {
        self.attributes.iter().position(|a| a == name)
    }

    pub fn region(&self, group: Group) -> PriorRegion {
        self.prior_regions.get(&group).copied().unwrap_or(PriorRegion::FULL)
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.attributes.len();
        if m == 0 {
            return Err(Error::Validation("schema declares no attributes".into()));
        }
        let names: BTreeSet<&String> = self.attributes.iter().collect();
        if names.len() != m {
            return Err(Error::Validation("duplicate attribute names".into()));
        }
        let mut owner: Vec<Option<Group>> = vec![None; m];
        for (group, members) in &self.groups {
            for &a in members {
                if a >= m {
                    return Err(Error::Validation(format!(
                        "group {group} references attribute index {a} but only {m} attributes exist"
                    )));
                }
                if let Some(prev) = owner[a] {
                    return Err(Error::Validation(format!(
                        "attribute {} assigned to both {prev} and {group}",
                        self.attributes[a]
                    )));
                }
                owner[a] = Some(*group);
            }
        }
        if let Some(a) = owner.iter().position(Option::is_none) {
            return Err(Error::Validation(format!(
                "attribute {} belongs to no group",
                self.attributes[a]
            )));
        }
        for group in self.groups.keys() {
            let region = self.prior_regions.get(group).ok_or_else(|| {
                Error::Validation(format!("group {group} has no prior region"))
            })?;
            if !region.is_valid() {
                return Err(Error::Validation(format!(
                    "group {group} prior region [{}, {}] is not an increasing interval within [0, 1]",
                    region.top, region.bottom
                )));
            }
        }
        for (group, points) in &self.keypoint_groups {
            let unique: BTreeSet<usize> = points.iter().copied().collect();
            if unique.len() != points.len() {
                return Err(Error::Validation(format!(
                    "group {group} lists a keypoint index twice"
                )));
            }
            if let Some(bad) = points.iter().find(|&&p| p >= NUM_KEYPOINTS) {
                return Err(Error::Validation(format!(
                    "group {group} keypoint index {bad} outside 0..{NUM_KEYPOINTS}"
                )));
            }
        }
        let [h, w] = self.input_size;
        if h == 0 || w == 0 || h % 16 != 0 || w % 16 != 0 {
            return Err(Error::Validation(format!(
                "input size {h}x{w} must be positive multiples of 16"
            )));
        }
        for level in Level::ALL {
            let lh = h / level.stride();
            for group in self.groups.keys() {
                if self.region(*group).rows(lh).is_empty() {
                    return Err(Error::Validation(format!(
                        "group {group} prior region is empty at {level} (height {lh})"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let schema: Self = serde_json::from_str(text)
            .map_err(|e| Error::Parse { line: e.line(), reason: e.to_string() })?;
        schema.validate()?;
        Ok(schema)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("schema serializes")
    }
}

pub fn default_prior_regions() -> IndexMap<Group, PriorRegion> {
    let mut r = IndexMap::new();
    r.insert(Group::Head, PriorRegion::new(0.0, 24.0 / 64.0));
    r.insert(Group::Torso, PriorRegion::new(8.0 / 64.0, 40.0 / 64.0));
    r.insert(Group::Bottom, PriorRegion::new(32.0 / 64.0, 1.0));
    r.insert(Group::All, PriorRegion::FULL);
    r
}

/// Keypoint indices (16-point body layout: 0 r-ankle .. 5 l-ankle, 6 pelvis,
/// 7 thorax, 8 neck, 9 head top, 10..15 arms) used per group.
pub fn default_keypoint_groups() -> IndexMap<Group, Vec<usize>> {
    let mut k = IndexMap::new();
    k.insert(Group::Head, vec![7, 8, 9, 12, 13]);
    k.insert(Group::Torso, vec![12, 13, 10, 11, 14, 15, 2, 3, 6]);
    k.insert(Group::Bottom, vec![2, 3, 6, 0, 1, 4, 5]);
    k.insert(Group::All, (0..16).collect());
    k
}

/// Reads and validates a schema config file.
pub fn load_schema(path: impl AsRef<Path>) -> Result<AttributeSchema> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    AttributeSchema::from_json(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_schema_is_valid_and_partitions_attributes() {
        let s = AttributeSchema::pa100k();
        s.validate().unwrap();
        assert_eq!(s.num_attributes(), 26);
        let total: usize = s.groups.values().map(Vec::len).sum();
        assert_eq!(total, 26);
        let head: Vec<&str> = s.groups[&Group::Head]
            .iter()
            .map(|&i| s.attributes[i].as_str())
            .collect();
        assert_eq!(head, ["Hat", "Glasses"]);
    }

    #[test]
    fn default_regions_reproduce_band_rows() {
        let s = AttributeSchema::pa100k();
        // stride 4 / 8 / 16 maps for a 256x192 input
        assert_eq!(s.region(Group::Head).rows(64), 0..24);
        assert_eq!(s.region(Group::Head).rows(32), 0..12);
        assert_eq!(s.region(Group::Head).rows(16), 0..6);
        assert_eq!(s.region(Group::Torso).rows(64), 8..40);
        assert_eq!(s.region(Group::Torso).rows(32), 4..20);
        assert_eq!(s.region(Group::Torso).rows(16), 2..10);
        assert_eq!(s.region(Group::Bottom).rows(64), 32..64);
        assert_eq!(s.region(Group::All).rows(16), 0..16);
    }

    #[test]
    fn rejects_double_assignment() {
        let mut s = AttributeSchema::pa100k();
        s.groups.get_mut(&Group::Head).unwrap().push(0);
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_inverted_region() {
        let mut s = AttributeSchema::pa100k();
        s.prior_regions.insert(Group::Head, PriorRegion::new(0.5, 0.2));
        assert!(matches!(s.validate(), Err(Error::Validation(_))));
    }

    #[test]
    fn rejects_out_of_range_keypoint() {
        let mut s = AttributeSchema::pa100k();
        s.keypoint_groups.insert(Group::Head, vec![7, 16]);
        assert!(s.validate().is_err());
        s.keypoint_groups.insert(Group::Head, vec![7, 7]);
        assert!(s.validate().is_err());
    }

    #[test]
    fn json_round_trip() {
        let s = AttributeSchema::pa100k();
        let back = AttributeSchema::from_json(&s.to_json()).unwrap();
        assert_eq!(s, back);
    }
}
