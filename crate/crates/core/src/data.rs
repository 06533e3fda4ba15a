//! Dataset bundles: embeddings, optional augmented view, per-row labels and
//! split tags, plus the on-disk directory format.
//!
//! A bundle directory holds `manifest.json`, `embeddings.bin`, optionally
//! `augmented.bin`, `rows.tsv` and optionally `classes.txt`. Matrices are raw
//! little-endian `f32`, row-major.
//!
//! Ground-truth labels of unlabeled training rows may be stored, but training
//! code only ever sees them through [`DatasetBundle::labeled_known`]; the
//! remaining accessors that expose labels are restricted to test rows or are
//! explicitly named for evaluation.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::path::Path;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Label value written for rows without a label.
pub const UNLABELED: i64 = -1;

pub const FORMAT_VERSION: u32 = 1;

const MANIFEST_FILE: &str = "manifest.json";
const EMBEDDINGS_FILE: &str = "embeddings.bin";
const AUGMENTED_FILE: &str = "augmented.bin";
const ROWS_FILE: &str = "rows.tsv";
const CLASSES_FILE: &str = "classes.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Split {
    LabeledKnown,
    UnlabeledTrain,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::LabeledKnown, Split::UnlabeledTrain, Split::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            Split::LabeledKnown => "LABELED_KNOWN",
            Split::UnlabeledTrain => "UNLABELED_TRAIN",
            Split::Test => "TEST",
        }
    }

    pub fn parse(tag: &str) -> Option<Split> {
        Split::ALL.into_iter().find(|s| s.as_str() == tag)
    }

    pub fn is_train(self) -> bool {
        !matches!(self, Split::Test)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    #[serde(rename = "LABELED_KNOWN")]
    pub labeled_known: usize,
    #[serde(rename = "UNLABELED_TRAIN")]
    pub unlabeled_train: usize,
    #[serde(rename = "TEST")]
    pub test: usize,
}

impl SplitCounts {
    pub fn total(&self) -> usize {
        self.labeled_known + self.unlabeled_train + self.test
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BundleManifest {
    pub format_version: u32,
    pub n: usize,
    pub dim: usize,
    pub dtype: String,
    pub has_augmented: bool,
    pub num_classes: usize,
    pub known_classes: Vec<usize>,
    pub split_counts: SplitCounts,
}

/// One violated bundle invariant.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    NonfiniteValue { row: usize },
    NonfiniteAugmented { row: usize },
    KnownSplitViolation { row: usize },
    MissingLabel { row: usize },
    LabelOutOfRange { row: usize },
    KnownClassOutOfRange { class: usize },
    AugmentedShapeMismatch,
    ClassNamesLength { expected: usize, found: usize },
    RowCountMismatch { embeddings: usize, labels: usize, splits: usize },
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diagnostic::NonfiniteValue { row } => write!(f, "NONFINITE_VALUE(row={row})"),
            Diagnostic::NonfiniteAugmented { row } => {
                write!(f, "NONFINITE_VALUE(augmented row={row})")
            }
            Diagnostic::KnownSplitViolation { row } => {
                write!(f, "KNOWN_SPLIT_VIOLATION(row={row})")
            }
            Diagnostic::MissingLabel { row } => write!(f, "MISSING_LABEL(row={row})"),
            Diagnostic::LabelOutOfRange { row } => write!(f, "LABEL_OUT_OF_RANGE(row={row})"),
            Diagnostic::KnownClassOutOfRange { class } => {
                write!(f, "KNOWN_CLASS_OUT_OF_RANGE(class={class})")
            }
            Diagnostic::AugmentedShapeMismatch => f.write_str("AUGMENTED_SHAPE_MISMATCH"),
            Diagnostic::ClassNamesLength { expected, found } => {
                write!(f, "CLASS_NAMES_LENGTH(expected={expected}, found={found})")
            }
            Diagnostic::RowCountMismatch { embeddings, labels, splits } => write!(
                f,
                "ROW_COUNT_MISMATCH(embeddings={embeddings}, labels={labels}, splits={splits})"
            ),
        }
    }
}

/// Rows and labels of the supervised subset.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledView {
    pub rows: Vec<usize>,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetBundle {
    embeddings: Array2<f32>,
    augmented: Option<Array2<f32>>,
    labels: Vec<Option<usize>>,
    split: Vec<Split>,
    class_names: Option<Vec<String>>,
    num_classes: usize,
    known_classes: BTreeSet<usize>,
}

impl DatasetBundle {
    /// Assembles a bundle without checking invariants; see [`Self::validate`].
    pub fn from_parts(
        embeddings: Array2<f32>,
        augmented: Option<Array2<f32>>,
        labels: Vec<Option<usize>>,
        split: Vec<Split>,
        num_classes: usize,
        known_classes: BTreeSet<usize>,
        class_names: Option<Vec<String>>,
    ) -> Self {
        Self { embeddings, augmented, labels, split, class_names, num_classes, known_classes }
    }

    /// Like [`Self::from_parts`] but rejects bundles with any diagnostic.
    pub fn try_new(
        embeddings: Array2<f32>,
        augmented: Option<Array2<f32>>,
        labels: Vec<Option<usize>>,
        split: Vec<Split>,
        num_classes: usize,
        known_classes: BTreeSet<usize>,
        class_names: Option<Vec<String>>,
    ) -> Result<Self> {
        let bundle = Self::from_parts(
            embeddings,
            augmented,
            labels,
            split,
            num_classes,
            known_classes,
            class_names,
        );
        bundle.ensure_valid()?;
        Ok(bundle)
    }

    pub fn len(&self) -> usize {
        self.embeddings.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn known_classes(&self) -> &BTreeSet<usize> {
        &self.known_classes
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn embeddings(&self) -> &Array2<f32> {
        &self.embeddings
    }

    pub fn augmented(&self) -> Option<&Array2<f32>> {
        self.augmented.as_ref()
    }

    pub fn splits(&self) -> &[Split] {
        &self.split
    }

    pub fn split_counts(&self) -> SplitCounts {
        let mut counts = SplitCounts::default();
        for s in &self.split {
            match s {
                Split::LabeledKnown => counts.labeled_known += 1,
                Split::UnlabeledTrain => counts.unlabeled_train += 1,
                Split::Test => counts.test += 1,
            }
        }
        counts
    }

    pub fn rows_with_split(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i] == split).collect()
    }

    /// Training rows (labeled known followed by unlabeled, in row order).
    pub fn train_rows(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.split[i].is_train()).collect()
    }

    pub fn test_rows(&self) -> Vec<usize> {
        self.rows_with_split(Split::Test)
    }

    /// The supervised subset. This is the only label access meant for training.
    pub fn labeled_known(&self) -> LabeledView {
        let rows = self.rows_with_split(Split::LabeledKnown);
        let labels = rows
            .iter()
            .map(|&i| self.labels[i].expect("labeled row without label"))
            .collect();
        LabeledView { rows, labels }
    }

    /// Ground truth of the test rows, in the order of [`Self::test_rows`].
    pub fn test_labels(&self) -> Vec<usize> {
        self.test_rows()
            .iter()
            .map(|&i| self.labels[i].expect("test row without label"))
            .collect()
    }

    /// All stored labels, including hidden ground truth of unlabeled rows.
    /// Evaluation and benchmark construction only.
    pub fn ground_truth_for_evaluation(&self) -> &[Option<usize>] {
        &self.labels
    }

    /// Per-class training frequency computed from stored ground truth.
    /// Evaluation only (head/medium/tail grouping).
    pub fn train_class_frequencies_for_evaluation(&self) -> Vec<usize> {
        let mut freq = vec![0; self.num_classes];
        for (i, s) in self.split.iter().enumerate() {
            if s.is_train() {
                if let Some(c) = self.labels[i] {
                    if c < self.num_classes {
                        freq[c] += 1;
                    }
                }
            }
        }
        freq
    }

    /// Gathers embedding rows as `f64`.
    pub fn gather(&self, rows: &[usize]) -> Array2<f64> {
        gather_rows(&self.embeddings, rows)
    }

    pub fn gather_augmented(&self, rows: &[usize]) -> Option<Array2<f64>> {
        self.augmented.as_ref().map(|a| gather_rows(a, rows))
    }

    /// Copy of this bundle with the stored labels of unlabeled training rows
    /// replaced. Used to check that training never reads them.
    pub fn with_hidden_labels(&self, labels: impl Fn(usize) -> Option<usize>) -> Self {
        let mut out = self.clone();
        for i in 0..out.len() {
            if out.split[i] == Split::UnlabeledTrain {
                out.labels[i] = labels(i);
            }
        }
        out
    }

    pub fn manifest(&self) -> BundleManifest {
        BundleManifest {
            format_version: FORMAT_VERSION,
            n: self.len(),
            dim: self.dim(),
            dtype: "float32le".to_string(),
            has_augmented: self.augmented.is_some(),
            num_classes: self.num_classes,
            known_classes: self.known_classes.iter().copied().collect(),
            split_counts: self.split_counts(),
        }
    }

    /// Lists every violated invariant; empty iff the bundle is valid.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut out = Vec::new();
        let n = self.embeddings.nrows();
        if self.labels.len() != n || self.split.len() != n {
            out.push(Diagnostic::RowCountMismatch {
                embeddings: n,
                labels: self.labels.len(),
                splits: self.split.len(),
            });
            return out;
        }
        for (row, values) in self.embeddings.rows().into_iter().enumerate() {
            if values.iter().any(|v| !v.is_finite()) {
                out.push(Diagnostic::NonfiniteValue { row });
            }
        }
        if let Some(aug) = &self.augmented {
            if aug.dim() != self.embeddings.dim() {
                out.push(Diagnostic::AugmentedShapeMismatch);
            } else {
                for (row, values) in aug.rows().into_iter().enumerate() {
                    if values.iter().any(|v| !v.is_finite()) {
                        out.push(Diagnostic::NonfiniteAugmented { row });
                    }
                }
            }
        }
        for &class in &self.known_classes {
            if class >= self.num_classes {
                out.push(Diagnostic::KnownClassOutOfRange { class });
            }
        }
        for row in 0..n {
            let label = self.labels[row];
            if let Some(c) = label {
                if c >= self.num_classes {
                    out.push(Diagnostic::LabelOutOfRange { row });
                    continue;
                }
            }
            match (self.split[row], label) {
                (Split::LabeledKnown, None) | (Split::Test, None) => {
                    out.push(Diagnostic::MissingLabel { row })
                }
                (Split::LabeledKnown, Some(c)) if !self.known_classes.contains(&c) => {
                    out.push(Diagnostic::KnownSplitViolation { row })
                }
                _ => {}
            }
        }
        if let Some(names) = &self.class_names {
            if names.len() != self.num_classes {
                out.push(Diagnostic::ClassNamesLength {
                    expected: self.num_classes,
                    found: names.len(),
                });
            }
        }
        out
    }

    fn ensure_valid(&self) -> Result<()> {
        let diagnostics = self.validate();
        if let Some(first) = diagnostics.first() {
            return Err(match first {
                Diagnostic::NonfiniteValue { row } | Diagnostic::NonfiniteAugmented { row } => {
                    let values = match first {
                        Diagnostic::NonfiniteValue { .. } => &self.embeddings,
                        _ => self.augmented.as_ref().unwrap(),
                    };
                    let col = values.row(*row).iter().position(|v| !v.is_finite()).unwrap_or(0);
                    Error::NonfiniteValue { row: *row, col }
                }
                _ => Error::InvalidBundle(
                    diagnostics.iter().map(ToString::to_string).collect::<Vec<_>>().join(", "),
                ),
            });
        }
        Ok(())
    }

    /// Writes the bundle directory, creating it if needed.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        fs::write(dir.join(EMBEDDINGS_FILE), encode_f32le(&self.embeddings))?;
        let aug_path = dir.join(AUGMENTED_FILE);
        match &self.augmented {
            Some(aug) => fs::write(&aug_path, encode_f32le(aug))?,
            None if aug_path.exists() => fs::remove_file(&aug_path)?,
            None => {}
        }
        let mut rows = String::with_capacity(self.len() * 24);
        for i in 0..self.len() {
            let label = self.labels[i].map_or(UNLABELED, |c| c as i64);
            rows.push_str(&format!("{i}\t{label}\t{}\n", self.split[i]));
        }
        fs::write(dir.join(ROWS_FILE), rows)?;
        let classes_path = dir.join(CLASSES_FILE);
        match &self.class_names {
            Some(names) => {
                let mut text = names.join("\n");
                text.push('\n');
                fs::write(&classes_path, text)?;
            }
            None if classes_path.exists() => fs::remove_file(&classes_path)?,
            None => {}
        }
        Ok(())
    }

    /// Reads a bundle directory and checks every invariant.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: BundleManifest = serde_json::from_slice(&read_required(dir, MANIFEST_FILE)?)
            .map_err(|e| Error::ManifestMismatch(format!("manifest.json: {e}")))?;
        if manifest.format_version != FORMAT_VERSION {
            return Err(Error::ManifestMismatch(format!(
                "unsupported format_version {}",
                manifest.format_version
            )));
        }
        if manifest.n == 0 || manifest.dim == 0 {
            return Err(Error::ManifestMismatch("n and dim must be positive".into()));
        }
        if manifest.split_counts.total() != manifest.n {
            return Err(Error::ManifestMismatch(format!(
                "split counts sum to {}, n = {}",
                manifest.split_counts.total(),
                manifest.n
            )));
        }
        let embeddings =
            decode_f32le(&read_required(dir, EMBEDDINGS_FILE)?, manifest.n, manifest.dim)?;
        let augmented = if manifest.has_augmented {
            Some(decode_f32le(&read_required(dir, AUGMENTED_FILE)?, manifest.n, manifest.dim)?)
        } else {
            None
        };
        let rows_text = String::from_utf8(read_required(dir, ROWS_FILE)?)
            .map_err(|e| Error::MalformedRows { line: 0, reason: e.to_string() })?;
        let (labels, split) = parse_rows(&rows_text, manifest.n)?;
        let class_names = match fs::read_to_string(dir.join(CLASSES_FILE)) {
            Ok(text) => Some(text.lines().map(str::to_string).collect()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => None,
            Err(e) => return Err(e.into()),
        };
        let bundle = Self::from_parts(
            embeddings,
            augmented,
            labels,
            split,
            manifest.num_classes,
            manifest.known_classes.iter().copied().collect(),
            class_names,
        );
        if bundle.split_counts() != manifest.split_counts {
            return Err(Error::ManifestMismatch(
                "split counts disagree with rows.tsv".into(),
            ));
        }
        bundle.ensure_valid()?;
        Ok(bundle)
    }
}

pub fn load_bundle(dir: &Path) -> Result<DatasetBundle> {
    DatasetBundle::load(dir)
}

pub fn save_bundle(bundle: &DatasetBundle, dir: &Path) -> Result<()> {
    bundle.save(dir)
}

pub fn validate_bundle(bundle: &DatasetBundle) -> Vec<Diagnostic> {
    bundle.validate()
}

fn read_required(dir: &Path, name: &str) -> Result<Vec<u8>> {
    let path = dir.join(name);
    fs::read(&path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path),
        _ => Error::Io(e),
    })
}

fn parse_rows(text: &str, n: usize) -> Result<(Vec<Option<usize>>, Vec<Split>)> {
    let mut labels = Vec::with_capacity(n);
    let mut split = Vec::with_capacity(n);
    for (line_no, line) in text.lines().enumerate() {
        let line_no = line_no + 1;
        let mut fields = line.split('\t');
        let (Some(index), Some(label), Some(tag), None) =
            (fields.next(), fields.next(), fields.next(), fields.next())
        else {
            return Err(Error::MalformedRows { line: line_no, reason: "expected 3 fields".into() });
        };
        let index: usize = index
            .parse()
            .map_err(|_| Error::MalformedRows { line: line_no, reason: "bad row index".into() })?;
        if index != labels.len() {
            return Err(Error::MalformedRows {
                line: line_no,
                reason: format!("row index {index} out of sequence"),
            });
        }
        let label: i64 = label
            .parse()
            .map_err(|_| Error::MalformedRows { line: line_no, reason: "bad label".into() })?;
        let label = match label {
            UNLABELED => None,
            l if l >= 0 => Some(l as usize),
            _ => {
                return Err(Error::MalformedRows { line: line_no, reason: "negative label".into() })
            }
        };
        let tag = Split::parse(tag)
            .ok_or_else(|| Error::InvalidSplitTag { tag: tag.to_string(), line: line_no })?;
        labels.push(label);
        split.push(tag);
    }
    if labels.len() != n {
        return Err(Error::ManifestMismatch(format!(
            "rows.tsv has {} rows, manifest declares {n}",
            labels.len()
        )));
    }
    Ok((labels, split))
}

/// Row-major little-endian `f32` encoding.
pub fn encode_f32le(matrix: &Array2<f32>) -> Vec<u8> {
    let mut bytes = Vec::with_capacity(matrix.len() * 4);
    for v in matrix.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes
}

pub fn decode_f32le(bytes: &[u8], rows: usize, cols: usize) -> Result<Array2<f32>> {
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::ManifestMismatch(format!(
            "declared {rows}x{cols} needs {expected} bytes, file holds {}",
            bytes.len()
        )));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), values).expect("length checked"))
}

/// Reads a headerless float32le matrix whose column count is known.
pub fn read_matrix(path: &Path, cols: usize) -> Result<Array2<f32>> {
    let bytes = fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    if cols == 0 || bytes.len() % (cols * 4) != 0 {
        return Err(Error::ManifestMismatch(format!(
            "{} bytes is not a whole number of {cols}-column rows",
            bytes.len()
        )));
    }
    decode_f32le(&bytes, bytes.len() / (cols * 4), cols)
}

pub fn write_matrix(path: &Path, matrix: &Array2<f32>) -> Result<()> {
    fs::write(path, encode_f32le(matrix))?;
    Ok(())
}

pub(crate) fn gather_rows(matrix: &Array2<f32>, rows: &[usize]) -> Array2<f64> {
    let cols = matrix.ncols();
    let mut out = Array2::zeros((rows.len(), cols));
    for (dst, &src) in rows.iter().enumerate() {
        for (o, v) in out.row_mut(dst).iter_mut().zip(matrix.row(src)) {
            *o = f64::from(*v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn tiny() -> DatasetBundle {
        DatasetBundle::try_new(
            array![[1.5, 0.0], [0.25, -1.0], [3.0, 2.0], [0.0, 1.0]],
            None,
            vec![Some(0), None, Some(1), Some(2)],
            vec![Split::LabeledKnown, Split::UnlabeledTrain, Split::Test, Split::Test],
            3,
            [0, 1].into_iter().collect(),
            None,
        )
        .unwrap()
    }

    #[test]
    fn loads_declared_shape() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(EMBEDDINGS_FILE)).unwrap().len(), 32);
        let loaded = load_bundle(dir.path()).unwrap();
        assert_eq!(loaded.embeddings().dim(), (4, 2));
        assert_eq!(loaded.embeddings()[[0, 0]], 1.5);
        assert_eq!(loaded, tiny());
    }

    #[test]
    fn short_matrix_file_is_manifest_mismatch() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        fs::write(dir.path().join(EMBEDDINGS_FILE), [0u8; 24]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::ManifestMismatch(_))));
    }

    #[test]
    fn missing_manifest() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::MissingFile(_))));
    }

    #[test]
    fn bad_split_tag() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let rows = fs::read_to_string(dir.path().join(ROWS_FILE)).unwrap();
        fs::write(dir.path().join(ROWS_FILE), rows.replace("UNLABELED_TRAIN", "UNLABELLED"))
            .unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::InvalidSplitTag { line: 2, .. })));
    }

    #[test]
    fn nonfinite_is_rejected_on_load() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        let mut bytes = fs::read(dir.path().join(EMBEDDINGS_FILE)).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(dir.path().join(EMBEDDINGS_FILE), bytes).unwrap();
        assert!(matches!(
            load_bundle(dir.path()),
            Err(Error::NonfiniteValue { row: 1, col: 1 })
        ));
    }

    #[test]
    fn no_augmented_file_when_absent() {
        let dir = tempfile::tempdir().unwrap();
        tiny().save(dir.path()).unwrap();
        assert!(!dir.path().join(AUGMENTED_FILE).exists());
        let manifest: BundleManifest =
            serde_json::from_slice(&fs::read(dir.path().join(MANIFEST_FILE)).unwrap()).unwrap();
        assert!(!manifest.has_augmented);
    }

    #[test]
    fn single_row_file_size() {
        let dir = tempfile::tempdir().unwrap();
        let b = DatasetBundle::try_new(
            Array2::from_elem((1, 7), 0.5),
            None,
            vec![Some(0)],
            vec![Split::Test],
            1,
            BTreeSet::new(),
            None,
        )
        .unwrap();
        b.save(dir.path()).unwrap();
        assert_eq!(fs::metadata(dir.path().join(EMBEDDINGS_FILE)).unwrap().len(), 7 * 4);
    }

    #[test]
    fn diagnostics() {
        let mut b = tiny();
        assert!(b.validate().is_empty());
        b.embeddings[[3, 0]] = f32::NAN;
        assert_eq!(b.validate(), vec![Diagnostic::NonfiniteValue { row: 3 }]);

        let mut b = tiny();
        b.labels[0] = Some(2);
        assert_eq!(b.validate(), vec![Diagnostic::KnownSplitViolation { row: 0 }]);

        let mut b = tiny();
        b.labels[2] = None;
        assert_eq!(b.validate(), vec![Diagnostic::MissingLabel { row: 2 }]);

        let mut b = tiny();
        b.augmented = Some(Array2::zeros((3, 2)));
        assert_eq!(b.validate(), vec![Diagnostic::AugmentedShapeMismatch]);
    }

    #[test]
    fn labeled_view_hides_unlabeled_rows() {
        let b = tiny();
        let view = b.labeled_known();
        assert_eq!(view.rows, vec![0]);
        assert_eq!(view.labels, vec![0]);
        assert_eq!(b.test_labels(), vec![1, 2]);
    }
}
