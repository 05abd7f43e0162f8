//! Datasets: the image-list format, synthetic two-domain shift benchmarks,
//! label-shift variants and augmentation.
//!
//! Target-domain labels are carried for evaluation only. Training code sees
//! [`Dataset::inputs`] and ids; the labels of a target dataset are reachable
//! through [`Dataset::evaluation_labels`] alone.

mod augment;
mod label_shift;
mod synthetic;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use augment::{augment, AugmentKind, AugmentParams, AugmentationPolicy};
pub use label_shift::{apply_label_shift, LabelShift};
pub use synthetic::{make_synthetic_shift, SyntheticSpec};

/// Channel-major image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageTensor {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    #[inline]
    pub fn idx(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.height + y) * self.width + x
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[self.idx(c, y, x)]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Input {
    /// Dense feature vector (synthetic benchmarks, precomputed embeddings).
    Features(Vec<f64>),
    /// Decoded image.
    Image(ImageTensor),
    /// Undecoded image file; see [`ImageFileLoader`].
    Path(PathBuf),
}

impl Input {
    /// Flat length of the input; `None` for undecoded paths.
    pub fn len(&self) -> Option<usize> {
        match self {
            Input::Features(v) => Some(v.len()),
            Input::Image(img) => Some(img.data.len()),
            Input::Path(_) => None,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == Some(0)
    }

    /// Flatten into a feature row.
    pub fn to_row(&self) -> Result<Vec<f64>> {
        match self {
            Input::Features(v) => Ok(v.clone()),
            Input::Image(img) => Ok(img.data.iter().map(|&v| v as f64).collect()),
            Input::Path(p) => Err(Error::invalid(format!(
                "input {} is not decoded; materialize the dataset first",
                p.display()
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Example {
    id: String,
    input: Input,
    label: Option<usize>,
}

impl Example {
    pub fn new(id: impl Into<String>, input: Input, label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            input,
            label,
        }
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn input(&self) -> &Input {
        &self.input
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DomainRole {
    Source,
    Target,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
    role: DomainRole,
    class_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize, role: DomainRole) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::invalid("num_classes must be positive"));
        }
        let mut seen = HashSet::with_capacity(examples.len());
        for ex in &examples {
            if !seen.insert(ex.id.as_str()) {
                return Err(Error::invalid(format!("duplicate example id `{}`", ex.id)));
            }
            if let Some(label) = ex.label {
                if label >= num_classes {
                    return Err(Error::invalid(format!(
                        "example `{}` has label {label} >= {num_classes}",
                        ex.id
                    )));
                }
            }
        }
        Ok(Self {
            examples,
            num_classes,
            role,
            class_names: None,
        })
    }

    pub fn with_class_names(mut self, names: Vec<String>) -> Result<Self> {
        if names.len() != self.num_classes {
            return Err(Error::shape(format!(
                "{} class names for {} classes",
                names.len(),
                self.num_classes
            )));
        }
        self.class_names = Some(names);
        Ok(self)
    }

    /// Same examples under a different role.
    pub fn with_role(mut self, role: DomainRole) -> Self {
        self.role = role;
        self
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn role(&self) -> DomainRole {
        self.role
    }

    pub fn class_names(&self) -> Option<&[String]> {
        self.class_names.as_deref()
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.examples.iter().map(|e| e.id.as_str())
    }

    pub fn inputs(&self) -> impl Iterator<Item = &Input> {
        self.examples.iter().map(|e| &e.input)
    }

    /// Training labels. Only a labeled source dataset has them.
    pub fn labels(&self) -> Result<Vec<usize>> {
        if self.role != DomainRole::Source {
            return Err(Error::invalid(
                "target labels are evaluation-only; use evaluation_labels",
            ));
        }
        self.all_labels()
    }

    /// Ground-truth labels for scoring, regardless of role.
    pub fn evaluation_labels(&self) -> Result<Vec<usize>> {
        self.all_labels()
    }

    pub fn is_labeled(&self) -> bool {
        !self.examples.is_empty() && self.examples.iter().all(|e| e.label.is_some())
    }

    fn all_labels(&self) -> Result<Vec<usize>> {
        self.examples
            .iter()
            .map(|e| {
                e.label
                    .ok_or_else(|| Error::invalid(format!("example `{}` has no label", e.id)))
            })
            .collect()
    }

    pub(crate) fn raw_label(&self, i: usize) -> Option<usize> {
        self.examples[i].label
    }

    pub(crate) fn from_parts(
        examples: Vec<Example>,
        num_classes: usize,
        role: DomainRole,
        class_names: Option<Vec<String>>,
    ) -> Self {
        Self {
            examples,
            num_classes,
            role,
            class_names,
        }
    }

    /// Flat input dimensionality; errors if inputs are ragged or undecoded.
    pub fn input_dim(&self) -> Result<usize> {
        let mut dim = None;
        for ex in &self.examples {
            let len = ex
                .input
                .len()
                .ok_or_else(|| Error::invalid(format!("example `{}` is not decoded", ex.id)))?;
            match dim {
                None => dim = Some(len),
                Some(d) if d != len => {
                    return Err(Error::shape(format!(
                        "example `{}` has dimension {len}, expected {d}",
                        ex.id
                    )))
                }
                _ => {}
            }
        }
        dim.ok_or_else(|| Error::invalid("empty dataset has no input dimension"))
    }

    /// Stack the inputs into an `n x dim` matrix.
    pub fn feature_matrix(&self) -> Result<Array2<f64>> {
        if self.examples.is_empty() {
            return Ok(Array2::zeros((0, 0)));
        }
        let dim = self.input_dim()?;
        stack_rows(self.examples.iter().map(|e| e.input.to_row()), dim)
    }

    /// Per-class example counts; unlabeled examples are ignored.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_classes];
        for ex in &self.examples {
            if let Some(l) = ex.label {
                counts[l] += 1;
            }
        }
        counts
    }

    /// Content hash over ids, inputs, labels and role.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        h.update(format!("{:?}|{}|", self.role, self.num_classes).as_bytes());
        for ex in &self.examples {
            h.update(ex.id.as_bytes());
            h.update([0u8]);
            match &ex.input {
                Input::Features(v) => v.iter().for_each(|x| h.update(x.to_le_bytes())),
                Input::Image(img) => img.data.iter().for_each(|x| h.update(x.to_le_bytes())),
                Input::Path(p) => h.update(p.to_string_lossy().as_bytes()),
            }
            h.update(ex.label.map(|l| l as i64).unwrap_or(-1).to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// Decode every `Input::Path` through `loader`.
    pub fn materialize(&self, loader: &ImageFileLoader) -> Result<Dataset> {
        let examples = self
            .examples
            .iter()
            .map(|ex| {
                let input = match &ex.input {
                    Input::Path(p) => Input::Image(loader.load(p)?),
                    other => other.clone(),
                };
                Ok(Example {
                    input,
                    ..ex.clone()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Dataset {
            examples,
            ..self.clone()
        })
    }
}

pub(crate) fn stack_rows(
    rows: impl Iterator<Item = Result<Vec<f64>>>,
    dim: usize,
) -> Result<Array2<f64>> {
    let mut data = Vec::new();
    let mut n = 0;
    for row in rows {
        let row = row?;
        if row.len() != dim {
            return Err(Error::shape(format!(
                "row of length {} where {dim} expected",
                row.len()
            )));
        }
        data.extend_from_slice(&row);
        n += 1;
    }
    Array2::from_shape_vec((n, dim), data).map_err(|e| Error::shape(e.to_string()))
}

/// Parse an image list: one `relative/path label` per line.
///
/// Blank lines are skipped. Ids are the relative paths as written.
pub fn load_image_list(path: &Path, root: &Path, num_classes: usize) -> Result<Dataset> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_image_list(&text, root, num_classes, DomainRole::Source)
}

pub fn parse_image_list(
    text: &str,
    root: &Path,
    num_classes: usize,
    role: DomainRole,
) -> Result<Dataset> {
    let mut examples = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        // paths may contain spaces; the label is the last token
        let (rel, label) =
            line.rsplit_once(char::is_whitespace)
                .ok_or_else(|| Error::MalformedLine {
                    line: line_no,
                    message: format!("expected `path label`, got `{line}`"),
                })?;
        let rel = rel.trim_end();
        let label: usize = label.parse().map_err(|_| Error::MalformedLine {
            line: line_no,
            message: format!("label `{label}` is not a non-negative integer"),
        })?;
        if label >= num_classes {
            return Err(Error::LabelOutOfRange {
                line: line_no,
                label,
                num_classes,
            });
        }
        if !seen.insert(rel.to_string()) {
            return Err(Error::MalformedLine {
                line: line_no,
                message: format!("duplicate entry `{rel}`"),
            });
        }
        examples.push(Example::new(rel, Input::Path(root.join(rel)), Some(label)));
    }
    Ok(Dataset::from_parts(examples, num_classes, role, None))
}

/// Serialise a labeled dataset in image-list format (ids as paths).
pub fn write_image_list(dataset: &Dataset, path: &Path) -> Result<()> {
    let mut out = String::new();
    for ex in &dataset.examples {
        let label = ex
            .label
            .ok_or_else(|| Error::invalid(format!("example `{}` has no label", ex.id)))?;
        writeln!(out, "{} {}", ex.id, label).expect("writing to a String cannot fail");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// Minimal image decoding hook: RGB, resized to a fixed square.
#[derive(Debug, Clone)]
pub struct ImageFileLoader {
    pub size: u32,
}

impl Default for ImageFileLoader {
    fn default() -> Self {
        Self { size: 32 }
    }
}

impl ImageFileLoader {
    pub fn load(&self, path: &Path) -> Result<ImageTensor> {
        let img = image::open(path)
            .map_err(|e| Error::invalid(format!("cannot decode {}: {e}", path.display())))?
            .resize_exact(self.size, self.size, image::imageops::FilterType::Triangle)
            .to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut t = ImageTensor::zeros(3, h, w);
        for (x, y, px) in img.enumerate_pixels() {
            for c in 0..3 {
                let i = t.idx(c, y as usize, x as usize);
                t.data[i] = px[c] as f32 / 255.0;
            }
        }
        Ok(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_list_gives_empty_dataset() {
        let ds = parse_image_list("", Path::new("/data"), 3, DomainRole::Source).unwrap();
        assert!(ds.is_empty());
    }

    #[test]
    fn parses_paths_and_labels() {
        let ds =
            parse_image_list("a.jpg 0\nb.jpg 2", Path::new("/r"), 3, DomainRole::Source).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.labels().unwrap(), vec![0, 2]);
        assert_eq!(ds.ids().collect::<Vec<_>>(), vec!["a.jpg", "b.jpg"]);
        assert_eq!(
            ds.examples()[1].input(),
            &Input::Path(PathBuf::from("/r/b.jpg"))
        );
    }

    #[test]
    fn out_of_range_label_reports_line() {
        let err = parse_image_list("a.jpg 5", Path::new("."), 3, DomainRole::Source).unwrap_err();
        assert_eq!(err.to_string(), "label out of range at line 1: 5 >= 3");
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let err = parse_image_list("a.jpg 0\nbroken\n", Path::new("."), 3, DomainRole::Source)
            .unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 2, .. }), "{err}");
        let err = parse_image_list("a.jpg x", Path::new("."), 3, DomainRole::Source).unwrap_err();
        assert!(matches!(err, Error::MalformedLine { line: 1, .. }));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err =
            load_image_list(Path::new("/nonexistent/list.txt"), Path::new("."), 3).unwrap_err();
        assert!(matches!(err, Error::Io { .. }));
    }

    #[test]
    fn paths_with_spaces() {
        let ds =
            parse_image_list("my dir/a b.jpg 1\n", Path::new("/r"), 2, DomainRole::Source).unwrap();
        assert_eq!(ds.examples()[0].id(), "my dir/a b.jpg");
    }

    #[test]
    fn target_labels_are_gated() {
        let ds = parse_image_list("a.jpg 0\n", Path::new("."), 2, DomainRole::Target).unwrap();
        assert!(ds.labels().is_err());
        assert_eq!(ds.evaluation_labels().unwrap(), vec![0]);
    }

    #[test]
    fn image_list_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let text = "cls0/x.png 0\ncls2/y.png 2\ncls1/z.png 1\n";
        let ds = parse_image_list(text, dir.path(), 3, DomainRole::Source).unwrap();
        let out = dir.path().join("list.txt");
        write_image_list(&ds, &out).unwrap();
        assert_eq!(fs::read_to_string(&out).unwrap(), text);
        let back = load_image_list(&out, dir.path(), 3).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn loader_decodes_to_chw() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.png");
        let img = image::RgbImage::from_fn(4, 4, |x, _| image::Rgb([x as u8 * 60, 0, 255]));
        img.save(&p).unwrap();
        let t = ImageFileLoader { size: 4 }.load(&p).unwrap();
        assert_eq!((t.channels, t.height, t.width), (3, 4, 4));
        assert!((t.get(2, 0, 0) - 1.0).abs() < 1e-6);
        assert_eq!(t.get(1, 3, 3), 0.0);
    }
}
