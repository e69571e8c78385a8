//! Dataset manifest: label vocabulary, template embeddings and per-image
//! feature files with annotations. Relative paths resolve against the
//! directory holding the manifest.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::qtf::{read_header, read_tensor};
use super::synthetic::SyntheticConfig;
use crate::error::{QksError, Result};
use crate::model::SpatialFeatures;
use crate::numerics::{Scalar, Tensor};
use crate::prompt_pool::{combine_templates, LabelEmbeddingTable, TemplateEmbeddingBank};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

/// One rectangular planted region, recorded by the synthetic generator.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Region {
    pub label: usize,
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageEntry {
    pub id: String,
    /// QTF file of shape `[H·W, C]` or `[H, W, C]`.
    pub features: String,
    /// Sorted, distinct label indices.
    pub labels: Vec<usize>,
    /// Optional `[H, W]` ground-truth map: label index per cell, −1 for background.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mask: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub regions: Vec<Region>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Splits {
    pub train: Vec<ImageEntry>,
    pub test: Vec<ImageEntry>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetManifest {
    pub name: String,
    pub d: usize,
    #[serde(rename = "C")]
    pub channels: usize,
    #[serde(rename = "H")]
    pub height: usize,
    #[serde(rename = "W")]
    pub width: usize,
    pub label_names: Vec<String>,
    pub seen: Vec<usize>,
    pub unseen: Vec<usize>,
    /// Template strings, provenance only.
    pub templates: Vec<String>,
    /// One QTF of shape `[n_labels, d]` per template.
    pub template_embeddings: Vec<String>,
    pub splits: Splits,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generator: Option<SyntheticConfig>,
    #[serde(skip)]
    pub(crate) root: PathBuf,
}

impl DatasetManifest {
    /// Parse and validate, including every referenced file header.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| QksError::io(path, e))?;
        let mut m: Self = serde_json::from_str(&text).map_err(|e| QksError::json(path, e))?;
        m.root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self).map_err(|e| QksError::json(path, e))?;
        fs::write(path, text + "\n").map_err(|e| QksError::io(path, e))
    }

    pub fn with_root(mut self, root: impl Into<PathBuf>) -> Self {
        self.root = root.into();
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn n_labels(&self) -> usize {
        self.label_names.len()
    }

    pub fn seen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.n_labels()];
        for &s in &self.seen {
            mask[s] = true;
        }
        mask
    }

    pub fn split(&self, split: Split) -> &[ImageEntry] {
        match split {
            Split::Train => &self.splits.train,
            Split::Test => &self.splits.test,
        }
    }

    /// Structural checks plus existence and shape of every referenced file.
    pub fn validate(&self) -> Result<()> {
        self.validate_structure()?;
        self.validate_files()
    }

    pub fn validate_structure(&self) -> Result<()> {
        let bad = |msg: String| Err(QksError::Manifest(msg));
        let n = self.n_labels();
        if n == 0 {
            return bad("no labels".into());
        }
        if self.d == 0 || self.channels == 0 || self.height == 0 || self.width == 0 {
            return bad("d, C, H and W must be positive".into());
        }
        let mut owner = vec![0u8; n];
        for &i in self.seen.iter().chain(&self.unseen) {
            if i >= n {
                return bad(format!("label index {i} out of range ({n} labels)"));
            }
            owner[i] += 1;
        }
        if let Some(i) = owner.iter().position(|&c| c != 1) {
            return bad(format!(
                "seen and unseen must partition the labels; label {i} appears {} times",
                owner[i]
            ));
        }
        if self.template_embeddings.is_empty() {
            return bad("at least one template embedding file is required".into());
        }
        if self.templates.len() != self.template_embeddings.len() {
            return bad(format!(
                "{} template strings but {} embedding files",
                self.templates.len(),
                self.template_embeddings.len()
            ));
        }
        let seen = self.seen_mask();
        for split in [Split::Train, Split::Test] {
            let mut ids = HashSet::new();
            for img in self.split(split) {
                if !ids.insert(img.id.as_str()) {
                    return bad(format!("duplicate image id {:?} in {split} split", img.id));
                }
                if img.labels.windows(2).any(|w| w[0] >= w[1]) {
                    return bad(format!("labels of image {:?} are not sorted and distinct", img.id));
                }
                for &l in &img.labels {
                    if l >= n {
                        return bad(format!("image {:?} references label {l} of {n}", img.id));
                    }
                    if split == Split::Train && !seen[l] {
                        return bad(format!(
                            "train image {:?} is annotated with unseen label {l} ({})",
                            img.id, self.label_names[l]
                        ));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_files(&self) -> Result<()> {
        let expect = |rel: &str, shapes: &[Vec<usize>]| -> Result<()> {
            let header = read_header(self.resolve(rel))?;
            if shapes.contains(&header.shape) {
                Ok(())
            } else {
                Err(QksError::Manifest(format!(
                    "{rel} has shape {:?}, expected {:?}",
                    header.shape, shapes[0]
                )))
            }
        };
        for rel in &self.template_embeddings {
            expect(rel, &[vec![self.n_labels(), self.d]])?;
        }
        let feature_shapes = [
            vec![self.height * self.width, self.channels],
            vec![self.height, self.width, self.channels],
        ];
        for img in self.splits.train.iter().chain(&self.splits.test) {
            expect(&img.features, &feature_shapes)?;
            if let Some(mask) = &img.mask {
                expect(mask, &[vec![self.height, self.width]])?;
            }
        }
        Ok(())
    }

    pub fn template_bank<T: Scalar>(&self) -> Result<TemplateEmbeddingBank<T>> {
        let slices: Vec<Tensor<T>> = self
            .template_embeddings
            .iter()
            .map(|rel| read_tensor(self.resolve(rel)))
            .collect::<Result<_>>()?;
        TemplateEmbeddingBank::from_slices(self.templates.clone(), &slices, self.label_names.clone())
    }

    /// Template-averaged label embeddings with this manifest's seen/unseen split.
    pub fn label_table<T: Scalar>(&self) -> Result<LabelEmbeddingTable<T>> {
        combine_templates(&self.template_bank()?, self.seen_mask())
    }

    pub fn load_features<T: Scalar>(&self, img: &ImageEntry) -> Result<SpatialFeatures<T>> {
        SpatialFeatures::new(read_tensor(self.resolve(&img.features))?)
    }

    pub fn load_mask(&self, img: &ImageEntry) -> Result<Option<Tensor<f32>>> {
        img.mask
            .as_ref()
            .map(|rel| read_tensor(self.resolve(rel)))
            .transpose()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, labels: Vec<usize>) -> ImageEntry {
        ImageEntry {
            id: id.into(),
            features: format!("{id}.qtf"),
            labels,
            mask: None,
            regions: vec![],
        }
    }

    fn manifest() -> DatasetManifest {
        DatasetManifest {
            name: "t".into(),
            d: 2,
            channels: 2,
            height: 1,
            width: 1,
            label_names: vec!["a".into(), "b".into(), "c".into()],
            seen: vec![0, 1],
            unseen: vec![2],
            templates: vec!["{}".into()],
            template_embeddings: vec!["t.qtf".into()],
            splits: Splits {
                train: vec![entry("x", vec![0, 1])],
                test: vec![entry("y", vec![1, 2])],
            },
            generator: None,
            root: PathBuf::new(),
        }
    }

    #[test]
    fn structure_accepts_valid() {
        manifest().validate_structure().unwrap();
    }

    #[test]
    fn train_image_with_unseen_label_rejected() {
        let mut m = manifest();
        m.splits.train[0].labels = vec![0, 2];
        let err = m.validate_structure().unwrap_err().to_string();
        assert!(err.contains("unseen label 2"), "{err}");
    }

    #[test]
    fn partition_and_ordering_enforced() {
        let mut m = manifest();
        m.unseen = vec![1, 2];
        assert!(m.validate_structure().is_err());
        let mut m = manifest();
        m.splits.test[0].labels = vec![2, 1];
        assert!(m.validate_structure().is_err());
        let mut m = manifest();
        m.splits.test[0].labels = vec![5];
        assert!(m.validate_structure().is_err());
    }

    #[test]
    fn json_uses_upper_case_geometry_keys() {
        let text = serde_json::to_string(&manifest()).unwrap();
        assert!(text.contains("\"C\":2") && text.contains("\"H\":1") && text.contains("\"W\":1"));
        let back: DatasetManifest = serde_json::from_str(&text).unwrap();
        assert_eq!(back, manifest());
    }
}
