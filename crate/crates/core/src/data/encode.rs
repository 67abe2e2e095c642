use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::numerics::BagRows;

use super::load::natural_cmp;
use super::{ContentKind, ContentSpec, DataError, Record};

/// Category labels of one content block, in encoding order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockVocab {
    pub name: String,
    pub kind: ContentKind,
    pub categories: Vec<String>,
    /// Threshold used by [`ContentKind::MedianSplit`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub median: Option<f64>,
}

impl BlockVocab {
    pub fn width(&self) -> usize {
        self.categories.len()
    }
}

/// One content block of a profile. `active` holds the set positions: one for
/// single-valued contents, one or more for multi-valued ones.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct FeatureBlock {
    pub name: String,
    pub width: usize,
    pub active: Vec<usize>,
}

impl FeatureBlock {
    pub fn dense(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.width];
        for &a in &self.active {
            v[a] = 1.0;
        }
        v
    }

    /// `(position, weight)` pairs whose weighted sum of embedding rows is the
    /// block embedding: multi-hot blocks average their rows.
    pub fn bag(&self) -> Vec<(usize, f64)> {
        let w = 1.0 / self.active.len().max(1) as f64;
        self.active.iter().map(|&a| (a, w)).collect()
    }
}

/// Encoded user or item profile: blocks in sorted content-name order.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct EncodedProfile {
    /// Position of the record in the raw dataset.
    pub index: usize,
    pub blocks: Vec<FeatureBlock>,
    /// Block holding the sensitive attribute (users only).
    pub sensitive_index: Option<usize>,
}

impl EncodedProfile {
    /// Sensitive class of the profile, if it has one.
    pub fn sensitive_label(&self) -> Option<usize> {
        let block = &self.blocks[self.sensitive_index?];
        match block.active.as_slice() {
            [c] => Some(*c),
            _ => None,
        }
    }

    /// Concatenated one-hot / multi-hot vector.
    pub fn dense(&self) -> Vec<f64> {
        self.blocks.iter().flat_map(FeatureBlock::dense).collect()
    }

    /// Copy with the binary sensitive attribute flipped; every other block is
    /// untouched.
    pub fn flip_sensitive(&self) -> Result<EncodedProfile, DataError> {
        let idx = self
            .sensitive_index
            .ok_or_else(|| DataError::Config("profile has no sensitive block".into()))?;
        let block = &self.blocks[idx];
        if block.width != 2 {
            return Err(DataError::Config(format!(
                "counterfactual flip needs a binary attribute, '{}' has {} values",
                block.name, block.width
            )));
        }
        let label = self
            .sensitive_label()
            .ok_or_else(|| DataError::Config("profile has no sensitive value".into()))?;
        let mut flipped = self.clone();
        flipped.blocks[idx].active = vec![1 - label];
        Ok(flipped)
    }

    /// One single-row bag per block, ready for [`crate::numerics::Tape::embedding_bag`].
    pub fn bag_rows(&self) -> Vec<BagRows> {
        self.blocks.iter().map(|b| Arc::new(vec![b.bag()])).collect()
    }

    /// Same profile with the sensitive block emptied (attribute-blind input).
    pub fn without_sensitive(&self) -> EncodedProfile {
        let mut p = self.clone();
        if let Some(idx) = p.sensitive_index {
            p.blocks[idx].active.clear();
        }
        p
    }
}

/// Encoded users or items together with their vocabularies.
#[derive(Clone, Debug)]
pub struct EncodedCatalog {
    pub vocab: Vec<BlockVocab>,
    pub profiles: Vec<EncodedProfile>,
    pub sensitive_index: Option<usize>,
}

impl EncodedCatalog {
    pub fn widths(&self) -> Vec<usize> {
        self.vocab.iter().map(BlockVocab::width).collect()
    }

    pub fn sensitive_classes(&self) -> Option<&[String]> {
        self.sensitive_index.map(|i| self.vocab[i].categories.as_slice())
    }
}

const AGE_BANDS: [(u32, &str); 7] = [
    (18, "1"),
    (25, "18"),
    (35, "25"),
    (45, "35"),
    (50, "45"),
    (56, "50"),
    (u32::MAX, "56"),
];

fn age_band(raw: &str) -> String {
    let age: u32 = raw.parse().unwrap_or(0);
    AGE_BANDS
        .iter()
        .find(|(upper, _)| age < *upper)
        .map(|(_, band)| band.to_string())
        .expect("last band is unbounded")
}

fn zip_prefix(raw: &str) -> String {
    match raw.chars().next() {
        Some(c) if c.is_ascii_digit() => c.to_string(),
        _ => "other".to_string(),
    }
}

fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

/// Category labels of one record for one content (empty = missing).
fn categories_of(record: &Record, spec: &ContentSpec, median: Option<f64>) -> Vec<String> {
    let raw = record.contents.get(&spec.name).cloned().unwrap_or_default();
    match spec.kind {
        ContentKind::Categorical | ContentKind::MultiValued => raw,
        ContentKind::AgeBands => raw.iter().map(|a| age_band(a)).collect(),
        ContentKind::ZipPrefix => raw.iter().map(|z| zip_prefix(z)).collect(),
        ContentKind::MedianSplit => raw
            .iter()
            .filter_map(|a| a.parse::<f64>().ok())
            .map(|a| {
                let m = median.expect("median computed for median-split contents");
                if a <= m { "young" } else { "old" }.to_string()
            })
            .collect(),
    }
}

fn encode(
    records: &[Record],
    specs: &[ContentSpec],
    sensitive: Option<&str>,
) -> Result<EncodedCatalog, DataError> {
    let mut specs = specs.to_vec();
    specs.sort_by(|a, b| a.name.cmp(&b.name));

    let sensitive_index = match sensitive {
        Some(name) => Some(
            specs
                .iter()
                .position(|s| s.name == name)
                .ok_or_else(|| DataError::Config(format!("unknown sensitive content '{name}'")))?,
        ),
        None => None,
    };

    let mut vocab = Vec::with_capacity(specs.len());
    let mut labels: Vec<Vec<Vec<String>>> = Vec::with_capacity(specs.len());
    for (b, spec) in specs.iter().enumerate() {
        let median = if spec.kind == ContentKind::MedianSplit {
            let mut ages: Vec<f64> = records
                .iter()
                .filter_map(|r| r.contents.get(&spec.name))
                .flatten()
                .filter_map(|a| a.parse().ok())
                .collect();
            median(&mut ages)
        } else {
            None
        };
        let is_sensitive = sensitive_index == Some(b);
        let per_record: Vec<Vec<String>> = records
            .iter()
            .map(|r| {
                let mut c = categories_of(r, spec, median);
                if c.is_empty() && !is_sensitive {
                    c.push("unknown".to_string());
                }
                c
            })
            .collect();
        let mut categories: Vec<String> = per_record.iter().flatten().cloned().collect();
        categories.sort_by(|a, b| natural_cmp(a, b));
        categories.dedup();
        if is_sensitive && categories.len() < 2 {
            return Err(DataError::Config(format!(
                "sensitive content '{}' has {} observed value(s), need at least 2",
                spec.name,
                categories.len()
            )));
        }
        vocab.push(BlockVocab {
            name: spec.name.clone(),
            kind: spec.kind,
            categories,
            median,
        });
        labels.push(per_record);
    }

    let profiles = (0..records.len())
        .map(|r| {
            let blocks = vocab
                .iter()
                .zip(&labels)
                .map(|(v, per_record)| {
                    let mut active: Vec<usize> = per_record[r]
                        .iter()
                        .map(|c| {
                            v.categories
                                .iter()
                                .position(|x| x == c)
                                .expect("category collected above")
                        })
                        .collect();
                    active.sort_unstable();
                    active.dedup();
                    FeatureBlock {
                        name: v.name.clone(),
                        width: v.width(),
                        active,
                    }
                })
                .collect();
            EncodedProfile {
                index: r,
                blocks,
                sensitive_index,
            }
        })
        .collect();

    Ok(EncodedCatalog {
        vocab,
        profiles,
        sensitive_index,
    })
}

/// One-hot encodes every user; the named content becomes the sensitive block
/// and its labels follow the sorted category order.
pub fn encode_users(raw: &super::RawDataset, sensitive: &str) -> Result<EncodedCatalog, DataError> {
    encode(&raw.users, &raw.user_contents, Some(sensitive))
}

pub fn encode_items(raw: &super::RawDataset) -> Result<EncodedCatalog, DataError> {
    encode(&raw.items, &raw.item_contents, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn user(id: &str, gender: &str, age: &str, occ: &str, zip: &str) -> Record {
        let mut c = BTreeMap::new();
        c.insert("gender".into(), vec![gender.into()]);
        c.insert("age".into(), vec![age.into()]);
        c.insert("occupation".into(), vec![occ.into()]);
        c.insert("zip".into(), vec![zip.into()]);
        Record {
            id: id.into(),
            contents: c,
        }
    }

    fn ml_specs() -> Vec<ContentSpec> {
        vec![
            ContentSpec::new("gender", ContentKind::Categorical),
            ContentSpec::new("age", ContentKind::AgeBands),
            ContentSpec::new("occupation", ContentKind::Categorical),
            ContentSpec::new("zip", ContentKind::ZipPrefix),
        ]
    }

    fn sample() -> EncodedCatalog {
        let users = vec![
            user("1", "M", "25", "writer", "55117"),
            user("2", "F", "17", "student", "10001"),
            user("3", "M", "60", "writer", "T8H1N"),
        ];
        encode(&users, &ml_specs(), Some("gender")).unwrap()
    }

    #[test]
    fn gender_sorted_f_before_m() {
        let cat = sample();
        let g = cat.vocab.iter().position(|v| v.name == "gender").unwrap();
        assert_eq!(cat.vocab[g].categories, vec!["F", "M"]);
        assert_eq!(cat.profiles[1].blocks[g].dense(), vec![1.0, 0.0]);
        assert_eq!(cat.profiles[1].sensitive_label(), Some(0));
        assert_eq!(cat.profiles[0].sensitive_label(), Some(1));
    }

    #[test]
    fn blocks_in_sorted_name_order() {
        let names: Vec<_> = sample().vocab.iter().map(|v| v.name.clone()).collect();
        assert_eq!(names, vec!["age", "gender", "occupation", "zip"]);
    }

    #[test]
    fn age_25_falls_in_25_to_34_band() {
        assert_eq!(age_band("25"), "25");
        assert_eq!(age_band("34"), "25");
        assert_eq!(age_band("17"), "1");
        assert_eq!(age_band("56"), "56");
        let cat = sample();
        let age = &cat.vocab[0];
        let block = &cat.profiles[0].blocks[0];
        assert_eq!(age.categories[block.active[0]], "25");
    }

    #[test]
    fn zip_bucketed_by_first_digit() {
        assert_eq!(zip_prefix("55117"), "5");
        assert_eq!(zip_prefix("T8H1N"), "other");
    }

    #[test]
    fn unknown_sensitive_is_config_error() {
        let users = vec![user("1", "M", "25", "writer", "55117")];
        assert!(matches!(
            encode(&users, &ml_specs(), Some("religion")),
            Err(DataError::Config(_))
        ));
        // a single observed value cannot be a sensitive attribute
        assert!(matches!(
            encode(&users, &ml_specs(), Some("gender")),
            Err(DataError::Config(_))
        ));
    }

    #[test]
    fn flip_touches_only_sensitive_block() {
        let cat = sample();
        let p = &cat.profiles[0];
        let f = p.flip_sensitive().unwrap();
        for (i, (a, b)) in p.blocks.iter().zip(&f.blocks).enumerate() {
            if Some(i) == p.sensitive_index {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
        assert_eq!(&f.flip_sensitive().unwrap(), p);
    }

    #[test]
    fn multi_valued_bag_averages() {
        let b = FeatureBlock {
            name: "genre".into(),
            width: 5,
            active: vec![1, 3],
        };
        assert_eq!(b.bag(), vec![(1, 0.5), (3, 0.5)]);
        assert_eq!(b.dense().iter().sum::<f64>(), 2.0);
    }

    #[test]
    fn median_split_labels() {
        let mut recs = Vec::new();
        for (i, age) in ["20", "30", "40", "", "50"].iter().enumerate() {
            let mut c = BTreeMap::new();
            c.insert("age".to_string(), if age.is_empty() { vec![] } else { vec![age.to_string()] });
            recs.push(Record {
                id: i.to_string(),
                contents: c,
            });
        }
        let specs = vec![ContentSpec::new("age", ContentKind::MedianSplit)];
        let cat = encode(&recs, &specs, Some("age")).unwrap();
        assert_eq!(cat.vocab[0].median, Some(35.0));
        assert_eq!(cat.vocab[0].categories, vec!["old", "young"]);
        assert_eq!(cat.profiles[0].sensitive_label(), Some(1));
        assert_eq!(cat.profiles[2].sensitive_label(), Some(0));
        assert_eq!(cat.profiles[3].sensitive_label(), None);
    }
}
