//! Dataset manifests: which records exist, where they live and which split
//! they belong to.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::record::{ActivationRecord, LayerSchema, LayerSelection, CLEAN};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(rename_all = "snake_case"))]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ManifestEntry {
    /// Record path, relative to the manifest file.
    pub path: String,
    pub input_id: String,
    pub perturbation: String,
    pub split: Split,
    /// Optional prediction record (softmax passes) for baseline scores.
    #[cfg_attr(
        feature = "serde",
        serde(default, skip_serializing_if = "Option::is_none")
    )]
    pub prediction: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Manifest {
    pub records: Vec<ManifestEntry>,
    /// `(H, W, L)` of the assembled activation volume.
    pub volume_dims: [usize; 3],
    pub layer_selection: LayerSelection,
    /// Layer layout shared by every record.
    pub layers: Vec<LayerSchema>,
}

/// How records are assigned to the train and test splits. Perturbed
/// records always go to the test split.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SplitRule {
    /// Every clean record trains the detector.
    CleanToTrain,
    /// Clean records whose `input_id` is listed are held out for testing.
    TestIds(BTreeSet<String>),
}

impl SplitRule {
    fn split_of(&self, record: &ActivationRecord) -> Split {
        if !record.is_clean() {
            return Split::Test;
        }
        match self {
            SplitRule::CleanToTrain => Split::Train,
            SplitRule::TestIds(ids) if ids.contains(&record.input_id) => Split::Test,
            SplitRule::TestIds(_) => Split::Train,
        }
    }
}

/// Builds a manifest from `(path, record)` pairs.
///
/// The volume height and width default to the largest layer resolution;
/// pass `target` to upsample further (e.g. to the network input size).
pub fn build_manifest(
    records: &[(String, &ActivationRecord)],
    rule: &SplitRule,
    selection: LayerSelection,
    target: Option<(usize, usize)>,
) -> Result<Manifest> {
    let (_, first) = records
        .first()
        .ok_or_else(|| Error::InsufficientData("no records".into()))?;
    let schema = first.schema();
    let mut seen = BTreeSet::new();
    let mut entries = Vec::with_capacity(records.len());
    for (path, record) in records {
        if record.schema() != schema {
            return Err(Error::SchemaMismatch(format!(
                "record {} ({}) differs from the layer layout of {}",
                record.input_id, record.perturbation, first.input_id
            )));
        }
        let split = rule.split_of(record);
        let key = (
            record.input_id.clone(),
            split,
            record.perturbation.clone(),
        );
        if !seen.insert(key) {
            return Err(Error::Duplicate(format!(
                "input {} with perturbation {} in {:?} split",
                record.input_id, record.perturbation, split
            )));
        }
        entries.push(ManifestEntry {
            path: path.clone(),
            input_id: record.input_id.clone(),
            perturbation: record.perturbation.clone(),
            split,
            prediction: None,
        });
    }
    let depth = selection.depth(&schema);
    if depth == 0 {
        return Err(Error::EmptySelection);
    }
    let native_h = schema.iter().map(|l| l.height).max().unwrap_or(0);
    let native_w = schema.iter().map(|l| l.width).max().unwrap_or(0);
    let (h, w) = target.unwrap_or((native_h, native_w));
    if h < native_h || w < native_w {
        return Err(Error::DownsamplingUnsupported {
            src: (native_h, native_w),
            target: (h, w),
        });
    }
    let manifest = Manifest {
        records: entries,
        volume_dims: [h, w, depth],
        layer_selection: selection,
        layers: schema,
    };
    manifest.validate()?;
    Ok(manifest)
}

impl Manifest {
    /// Re-checks the manifest invariants (used after loading from disk).
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for e in &self.records {
            if e.split == Split::Train && e.perturbation != CLEAN {
                return Err(Error::PerturbedTrainRecord(format!(
                    "{} ({})",
                    e.input_id, e.perturbation
                )));
            }
            if !seen.insert((&e.input_id, e.split, &e.perturbation)) {
                return Err(Error::Duplicate(format!(
                    "input {} with perturbation {} in {:?} split",
                    e.input_id, e.perturbation, e.split
                )));
            }
        }
        let depth = self.layer_selection.depth(&self.layers);
        if depth != self.volume_dims[2] {
            return Err(Error::SchemaMismatch(format!(
                "selection yields depth {depth}, manifest declares {}",
                self.volume_dims[2]
            )));
        }
        Ok(())
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.records.iter().filter(move |e| e.split == split)
    }

    /// Test-split perturbation tags other than the clean tag, sorted.
    pub fn perturbations(&self) -> Vec<String> {
        let tags: BTreeSet<&str> = self
            .split(Split::Test)
            .map(|e| e.perturbation.as_str())
            .filter(|p| *p != CLEAN)
            .collect();
        tags.into_iter().map(ToString::to_string).collect()
    }

    /// Checks that a loaded record carries the layer layout of this manifest.
    pub fn check_record(&self, record: &ActivationRecord) -> Result<()> {
        if record.schema() != self.layers {
            return Err(Error::SchemaMismatch(format!(
                "record {} does not match the manifest layer layout",
                record.input_id
            )));
        }
        Ok(())
    }

    /// Number of entries per `(split, perturbation)`.
    pub fn counts(&self) -> BTreeMap<(Split, String), usize> {
        let mut out = BTreeMap::new();
        for e in &self.records {
            *out.entry((e.split, e.perturbation.clone())).or_insert(0) += 1;
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::Layer;
    use alloc::vec;

    fn rec(id: &str, pert: &str) -> ActivationRecord {
        ActivationRecord {
            input_id: id.into(),
            perturbation: pert.into(),
            layers: vec![Layer::new("l0.conv", 1, 2, 2, vec![0.0; 4]).unwrap()],
        }
    }

    fn pairs(recs: &[ActivationRecord]) -> Vec<(String, &ActivationRecord)> {
        recs.iter()
            .enumerate()
            .map(|(i, r)| (format!("r{i}.daac"), r))
            .collect()
    }

    #[test]
    fn clean_to_train() {
        let recs = vec![rec("a", "none"), rec("b", "none"), rec("a", "fog"), rec("b", "fog")];
        let m = build_manifest(&pairs(&recs), &SplitRule::CleanToTrain, LayerSelection::Everywhere, None)
            .unwrap();
        assert_eq!(m.split(Split::Train).count(), 2);
        assert_eq!(m.split(Split::Test).count(), 2);
        assert_eq!(m.volume_dims, [2, 2, 1]);
        assert_eq!(m.perturbations(), vec![String::from("fog")]);
    }

    #[test]
    fn unknown_tag_passes_through() {
        let recs = vec![rec("a", "none"), rec("a", "gd_uap_custom")];
        let m = build_manifest(&pairs(&recs), &SplitRule::CleanToTrain, LayerSelection::Everywhere, None)
            .unwrap();
        assert_eq!(m.records[1].perturbation, "gd_uap_custom");
    }

    #[test]
    fn duplicate_rejected() {
        let recs = vec![rec("a", "fog"), rec("a", "fog")];
        assert!(matches!(
            build_manifest(&pairs(&recs), &SplitRule::CleanToTrain, LayerSelection::Everywhere, None),
            Err(Error::Duplicate(_))
        ));
    }

    #[test]
    fn schema_mismatch_rejected() {
        let mut other = rec("b", "none");
        other.layers[0] = Layer::new("l0.conv", 2, 1, 1, vec![0.0; 2]).unwrap();
        let recs = vec![rec("a", "none"), other];
        assert!(matches!(
            build_manifest(&pairs(&recs), &SplitRule::CleanToTrain, LayerSelection::Everywhere, None),
            Err(Error::SchemaMismatch(_))
        ));
    }

    #[test]
    fn held_out_clean_ids() {
        let recs = vec![rec("a", "none"), rec("b", "none"), rec("b", "fog")];
        let rule = SplitRule::TestIds(["b".into()].into_iter().collect());
        let m = build_manifest(&pairs(&recs), &rule, LayerSelection::Everywhere, None).unwrap();
        assert_eq!(m.records[0].split, Split::Train);
        assert_eq!(m.records[1].split, Split::Test);
        assert_eq!(m.records[2].split, Split::Test);
    }

    #[test]
    fn perturbed_train_entry_rejected() {
        let recs = vec![rec("a", "none")];
        let mut m =
            build_manifest(&pairs(&recs), &SplitRule::CleanToTrain, LayerSelection::Everywhere, None)
                .unwrap();
        m.records[0].perturbation = "fog".into();
        assert!(matches!(m.validate(), Err(Error::PerturbedTrainRecord(_))));
    }

    #[test]
    fn empty_selection_rejected() {
        let recs = vec![rec("a", "none")];
        assert!(matches!(
            build_manifest(&pairs(&recs), &SplitRule::CleanToTrain, LayerSelection::BeforeBatchnorm, None),
            Err(Error::EmptySelection)
        ));
    }
}
