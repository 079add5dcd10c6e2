//! Synthetic two-level hierarchical datasets and the plain-text dataset format.
//!
//! Generation order (fixed, so other implementations can reproduce a dataset
//! from its spec and seed with the same [`Rng`](crate::rng::Rng) stream):
//!
//! 1. coarse centers, coarse-major then dimension: `coarse_spread * normal()`
//! 2. fine centers, fine id `c * fines_per_coarse + f`: parent center plus
//!    `fine_spread * normal()` per dimension
//! 3. samples, fine-major: fine center plus `noise_sigma * normal()` per dimension
//! 4. per fine class (ascending), the sample order is shuffled and the first
//!    `max(1, (n + 2) / 5)` samples go to the test split
//! 5. the train list and then the test list are shuffled; ids are assigned
//!    `0..train.len()` for train and continue for test
//!
//! File format:
//!
//! ```text
//! DNA-DS v1 dim=<d> coarse=<M> fine=<K>
//! <id>,<coarse>,<fine>,<v1>,...,<vd>     (train rows)
//! #split=test
//! <id>,<coarse>,<fine>,<v1>,...,<vd>     (test rows)
//! ```
//!
//! A fine label of `-1` marks it unknown. Values use the shortest decimal
//! representation that parses back to the same `f64`.

use std::collections::{HashMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{DnaError, Result};
use crate::linalg::Matrix;
use crate::rng::Rng;

pub const DATASET_MAGIC: &str = "DNA-DS v1";
pub const TEST_SPLIT_MARKER: &str = "#split=test";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HierarchySpec {
    pub num_coarse: usize,
    pub fines_per_coarse: usize,
    pub samples_per_fine: usize,
    pub input_dim: usize,
    pub coarse_spread: f64,
    pub fine_spread: f64,
    pub noise_sigma: f64,
    /// Linear shrink of per-fine sample counts across coarse classes:
    /// coarse `c` gets `round(samples_per_fine * (1 - imbalance * c / (M - 1)))`.
    /// Zero gives balanced classes.
    pub imbalance: f64,
    pub seed: u64,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        HierarchySpec {
            num_coarse: 10,
            fines_per_coarse: 3,
            samples_per_fine: 60,
            input_dim: 32,
            coarse_spread: 3.0,
            fine_spread: 1.0,
            noise_sigma: 0.5,
            imbalance: 0.0,
            seed: 0,
        }
    }
}

impl HierarchySpec {
    pub fn num_fine(&self) -> usize {
        self.num_coarse * self.fines_per_coarse
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(DnaError::Config(m));
        if self.num_coarse < 1 {
            return fail("num_coarse must be >= 1".into());
        }
        if self.fines_per_coarse < 1 {
            return fail("fines_per_coarse must be >= 1".into());
        }
        if self.samples_per_fine < 2 {
            return fail(format!(
                "samples_per_fine must be >= 2 so every fine class reaches both splits (got {})",
                self.samples_per_fine
            ));
        }
        if self.input_dim < 1 {
            return fail("input_dim must be >= 1".into());
        }
        for (name, v) in [
            ("coarse_spread", self.coarse_spread),
            ("fine_spread", self.fine_spread),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !v.is_finite() || v < 0.0 {
                return fail(format!(
                    "{name} must be a finite nonnegative number (got {v})"
                ));
            }
        }
        if self.fine_spread >= self.coarse_spread {
            return fail(format!(
                "fine_spread < coarse_spread violated ({} >= {})",
                self.fine_spread, self.coarse_spread
            ));
        }
        if self.noise_sigma >= self.fine_spread {
            return fail(format!(
                "noise_sigma < fine_spread violated ({} >= {})",
                self.noise_sigma, self.fine_spread
            ));
        }
        if !(0.0..1.0).contains(&self.imbalance) {
            return fail(format!(
                "imbalance must lie in [0, 1) (got {})",
                self.imbalance
            ));
        }
        if (0..self.num_coarse).any(|c| self.samples_for_coarse(c) < 2) {
            return fail("imbalance leaves a fine class with fewer than 2 samples".into());
        }
        Ok(())
    }

    /// Samples drawn for each fine class of coarse class `c`.
    pub fn samples_for_coarse(&self, c: usize) -> usize {
        if self.imbalance == 0.0 || self.num_coarse == 1 {
            return self.samples_per_fine;
        }
        let frac = c as f64 / (self.num_coarse - 1) as f64;
        (self.samples_per_fine as f64 * (1.0 - self.imbalance * frac)).round() as usize
    }
}

/// Test-split share of a fine class with `n` samples (20%, rounded half up, at least one).
pub fn test_count(n: usize) -> usize {
    ((n + 2) / 5).max(1)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: usize,
    pub x: Vec<f64>,
    pub coarse: usize,
    /// Hidden fine label; `None` when unknown (external embeddings).
    pub fine: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub input_dim: usize,
    pub num_coarse: usize,
    pub num_fine: usize,
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

/// Everything the trainer is allowed to see about a split: inputs and coarse labels.
#[derive(Debug, Clone)]
pub struct TrainSplit {
    pub inputs: Matrix,
    pub coarse: Vec<usize>,
    pub num_coarse: usize,
}

/// Fine labels of one split. Only evaluation code can read the values.
#[derive(Debug, Clone, PartialEq)]
pub struct FineLabels {
    pub(crate) labels: Vec<usize>,
    pub(crate) num_fine: usize,
}

impl FineLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn num_fine(&self) -> usize {
        self.num_fine
    }
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Sample] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn inputs(&self, split: Split) -> Matrix {
        let rows: Vec<&[f64]> = self.split(split).iter().map(|s| s.x.as_slice()).collect();
        Matrix::from_rows(&rows, self.input_dim).expect("dataset rows have validated dimension")
    }

    pub fn view(&self, split: Split) -> TrainSplit {
        TrainSplit {
            inputs: self.inputs(split),
            coarse: self.split(split).iter().map(|s| s.coarse).collect(),
            num_coarse: self.num_coarse,
        }
    }

    pub fn train_view(&self) -> TrainSplit {
        self.view(Split::Train)
    }

    /// Fine labels of a split, or `None` if any of them is unknown.
    pub fn fine_labels(&self, split: Split) -> Option<FineLabels> {
        let labels = self
            .split(split)
            .iter()
            .map(|s| s.fine)
            .collect::<Option<Vec<_>>>()?;
        Some(FineLabels {
            labels,
            num_fine: self.num_fine,
        })
    }

    pub fn has_fine_labels(&self) -> bool {
        self.train
            .iter()
            .chain(&self.test)
            .all(|s| s.fine.is_some())
    }

    /// Check structural invariants: dimensions, label ranges, unique ids and a
    /// consistent fine → coarse parent map.
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        let mut parent: HashMap<usize, usize> = HashMap::new();
        for s in self.train.iter().chain(&self.test) {
            if s.x.len() != self.input_dim {
                return Err(DnaError::Structural(format!(
                    "sample {} has dimension {} (expected {})",
                    s.id,
                    s.x.len(),
                    self.input_dim
                )));
            }
            if s.x.iter().any(|v| !v.is_finite()) {
                return Err(DnaError::Numeric(format!(
                    "sample {} has a non-finite value",
                    s.id
                )));
            }
            if !ids.insert(s.id) {
                return Err(DnaError::Structural(format!(
                    "duplicate sample id {}",
                    s.id
                )));
            }
            if s.coarse >= self.num_coarse {
                return Err(DnaError::Structural(format!(
                    "sample {} coarse label {} out of range [0, {})",
                    s.id, s.coarse, self.num_coarse
                )));
            }
            if let Some(f) = s.fine {
                if f >= self.num_fine {
                    return Err(DnaError::Structural(format!(
                        "sample {} fine label {f} out of range [0, {})",
                        s.id, self.num_fine
                    )));
                }
                let p = *parent.entry(f).or_insert(s.coarse);
                if p != s.coarse {
                    return Err(DnaError::Structural(format!(
                        "fine class {f} appears under coarse classes {p} and {}",
                        s.coarse
                    )));
                }
            }
        }
        Ok(())
    }
}

pub fn generate(spec: &HierarchySpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = Rng::new(spec.seed);
    let dim = spec.input_dim;

    let coarse_centers: Vec<Vec<f64>> = (0..spec.num_coarse)
        .map(|_| {
            (0..dim)
                .map(|_| spec.coarse_spread * rng.normal())
                .collect()
        })
        .collect();

    let mut fine_centers = Vec::with_capacity(spec.num_fine());
    for center in &coarse_centers {
        for _ in 0..spec.fines_per_coarse {
            let c: Vec<f64> = center
                .iter()
                .map(|&v| v + spec.fine_spread * rng.normal())
                .collect();
            fine_centers.push(c);
        }
    }

    let mut per_fine: Vec<Vec<Vec<f64>>> = Vec::with_capacity(spec.num_fine());
    for (fine, center) in fine_centers.iter().enumerate() {
        let n = spec.samples_for_coarse(fine / spec.fines_per_coarse);
        let xs = (0..n)
            .map(|_| {
                center
                    .iter()
                    .map(|&v| v + spec.noise_sigma * rng.normal())
                    .collect()
            })
            .collect();
        per_fine.push(xs);
    }

    let mut train = Vec::new();
    let mut test = Vec::new();
    for (fine, xs) in per_fine.into_iter().enumerate() {
        let coarse = fine / spec.fines_per_coarse;
        let n_test = test_count(xs.len());
        let mut order: Vec<usize> = (0..xs.len()).collect();
        rng.shuffle(&mut order);
        let mut xs: Vec<Option<Vec<f64>>> = xs.into_iter().map(Some).collect();
        for (rank, &i) in order.iter().enumerate() {
            let sample = Sample {
                id: 0,
                x: xs[i].take().expect("each index visited once"),
                coarse,
                fine: Some(fine),
            };
            if rank < n_test {
                test.push(sample);
            } else {
                train.push(sample);
            }
        }
    }
    rng.shuffle(&mut train);
    rng.shuffle(&mut test);
    for (id, s) in train.iter_mut().chain(test.iter_mut()).enumerate() {
        s.id = id;
    }

    Ok(Dataset {
        input_dim: dim,
        num_coarse: spec.num_coarse,
        num_fine: spec.num_fine(),
        train,
        test,
    })
}

fn write_sample(out: &mut String, s: &Sample) {
    let fine = s.fine.map_or(-1, |f| f as i64);
    write!(out, "{},{},{}", s.id, s.coarse, fine).unwrap();
    for v in &s.x {
        // Debug formatting of f64 is the shortest round-trip representation.
        write!(out, ",{v:?}").unwrap();
    }
    out.push('\n');
}

pub fn format_dataset(ds: &Dataset) -> String {
    let mut out = format!(
        "{DATASET_MAGIC} dim={} coarse={} fine={}\n",
        ds.input_dim, ds.num_coarse, ds.num_fine
    );
    for s in &ds.train {
        write_sample(&mut out, s);
    }
    out.push_str(TEST_SPLIT_MARKER);
    out.push('\n');
    for s in &ds.test {
        write_sample(&mut out, s);
    }
    out
}

pub fn write_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_dataset(ds)).map_err(|e| DnaError::io(path, e))
}

fn parse_header(line: &str) -> Result<(usize, usize, usize)> {
    let rest = line.strip_prefix(DATASET_MAGIC).ok_or_else(|| {
        DnaError::parse(
            1,
            format!("expected header starting with `{DATASET_MAGIC}`"),
        )
    })?;
    let mut dim = None;
    let mut coarse = None;
    let mut fine = None;
    for tok in rest.split_whitespace() {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| DnaError::parse(1, format!("malformed header field `{tok}`")))?;
        let v: usize = v
            .parse()
            .map_err(|_| DnaError::parse(1, format!("header field `{k}` is not a count")))?;
        match k {
            "dim" => dim = Some(v),
            "coarse" => coarse = Some(v),
            "fine" => fine = Some(v),
            _ => return Err(DnaError::parse(1, format!("unknown header field `{k}`"))),
        }
    }
    match (dim, coarse, fine) {
        (Some(d), Some(c), Some(f)) => Ok((d, c, f)),
        _ => Err(DnaError::parse(1, "header needs dim=, coarse= and fine=")),
    }
}

fn parse_sample(line: &str, lineno: usize, dim: usize) -> Result<Sample> {
    let mut fields = line.split(',');
    let mut next = |what: &str| {
        fields
            .next()
            .ok_or_else(|| DnaError::parse(lineno, format!("missing {what} column")))
    };
    let id = next("id")?
        .trim()
        .parse::<usize>()
        .map_err(|_| DnaError::parse(lineno, "id is not a nonnegative integer"))?;
    let coarse = next("coarse")?
        .trim()
        .parse::<usize>()
        .map_err(|_| DnaError::parse(lineno, "coarse label is not a nonnegative integer"))?;
    let fine = next("fine")?
        .trim()
        .parse::<i64>()
        .map_err(|_| DnaError::parse(lineno, "fine label is not an integer"))?;
    let fine = match fine {
        -1 => None,
        f if f >= 0 => Some(f as usize),
        f => {
            return Err(DnaError::parse(
                lineno,
                format!("fine label {f} is invalid"),
            ))
        }
    };
    let x = fields
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| DnaError::parse(lineno, format!("`{t}` is not a number")))
        })
        .collect::<Result<Vec<f64>>>()?;
    if x.len() != dim {
        return Err(DnaError::Structural(format!(
            "line {lineno}: row has {} values but header declares dim={dim}",
            x.len()
        )));
    }
    Ok(Sample {
        id,
        x,
        coarse,
        fine,
    })
}

pub fn parse_dataset(text: &str) -> Result<Dataset> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines
        .next()
        .ok_or_else(|| DnaError::parse(1, "empty file"))?;
    let (input_dim, num_coarse, num_fine) = parse_header(header.trim_end())?;
    let mut train = Vec::new();
    let mut test = Vec::new();
    let mut in_test = false;
    for (i, line) in lines {
        let lineno = i + 1;
        let line = line.trim_end();
        if line.is_empty() {
            continue;
        }
        if line == TEST_SPLIT_MARKER {
            if in_test {
                return Err(DnaError::parse(lineno, "duplicate test split marker"));
            }
            in_test = true;
            continue;
        }
        let s = parse_sample(line, lineno, input_dim)?;
        if in_test {
            test.push(s);
        } else {
            train.push(s);
        }
    }
    let ds = Dataset {
        input_dim,
        num_coarse,
        num_fine,
        train,
        test,
    };
    ds.validate()?;
    Ok(ds)
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| DnaError::io(path, e))?;
    parse_dataset(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> HierarchySpec {
        HierarchySpec {
            num_coarse: 2,
            fines_per_coarse: 2,
            samples_per_fine: 10,
            input_dim: 4,
            seed: 7,
            ..HierarchySpec::default()
        }
    }

    #[test]
    fn counts_match_spec() {
        let ds = generate(&small_spec()).unwrap();
        assert_eq!(ds.num_fine, 4);
        assert_eq!(ds.train.len(), 32);
        assert_eq!(ds.test.len(), 8);
        for f in 0..4 {
            assert_eq!(ds.train.iter().filter(|s| s.fine == Some(f)).count(), 8);
            assert_eq!(ds.test.iter().filter(|s| s.fine == Some(f)).count(), 2);
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let a = format_dataset(&generate(&small_spec()).unwrap());
        let b = format_dataset(&generate(&small_spec()).unwrap());
        assert_eq!(a, b);
        let other = HierarchySpec {
            seed: 8,
            ..small_spec()
        };
        assert_ne!(a, format_dataset(&generate(&other).unwrap()));
    }

    #[test]
    fn zero_noise_collapses_fine_classes() {
        let spec = HierarchySpec {
            noise_sigma: 0.0,
            ..small_spec()
        };
        let ds = generate(&spec).unwrap();
        for f in 0..ds.num_fine {
            let xs: Vec<_> = ds
                .train
                .iter()
                .chain(&ds.test)
                .filter(|s| s.fine == Some(f))
                .map(|s| &s.x)
                .collect();
            assert!(xs.windows(2).all(|w| w[0] == w[1]));
        }
    }

    #[test]
    fn nesting_and_ids() {
        let ds = generate(&small_spec()).unwrap();
        for s in ds.train.iter().chain(&ds.test) {
            assert_eq!(s.fine.unwrap() / 2, s.coarse);
        }
        for (i, s) in ds.train.iter().enumerate() {
            assert_eq!(s.id, i);
        }
        assert_eq!(ds.test[0].id, ds.train.len());
    }

    #[test]
    fn rejects_bad_specs() {
        let cases = [
            (
                HierarchySpec {
                    num_coarse: 0,
                    ..small_spec()
                },
                "num_coarse",
            ),
            (
                HierarchySpec {
                    fine_spread: 5.0,
                    ..small_spec()
                },
                "fine_spread < coarse_spread",
            ),
            (
                HierarchySpec {
                    noise_sigma: 2.0,
                    ..small_spec()
                },
                "noise_sigma < fine_spread",
            ),
            (
                HierarchySpec {
                    samples_per_fine: 1,
                    ..small_spec()
                },
                "samples_per_fine",
            ),
        ];
        for (spec, needle) in cases {
            let err = generate(&spec).unwrap_err().to_string();
            assert!(err.contains(needle), "{err} should mention {needle}");
        }
    }

    #[test]
    fn round_trip_text() {
        let ds = generate(&small_spec()).unwrap();
        let text = format_dataset(&ds);
        assert!(text.starts_with("DNA-DS v1 dim=4 coarse=2 fine=4\n"));
        assert_eq!(parse_dataset(&text).unwrap(), ds);
    }

    #[test]
    fn wrong_dimension_is_structural() {
        let text = "DNA-DS v1 dim=2 coarse=1 fine=1\n0,0,0,1.0,2.0\n1,0,0,1.0\n";
        match parse_dataset(text) {
            Err(DnaError::Structural(m)) => assert!(m.contains("line 3")),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn malformed_value_reports_line() {
        let text = "DNA-DS v1 dim=1 coarse=1 fine=1\n0,0,0,1.0\n1,0,0,abc\n";
        match parse_dataset(text) {
            Err(DnaError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_fine_labels_load_as_absent() {
        let text = "DNA-DS v1 dim=1 coarse=1 fine=2\n0,0,-1,0.5\n#split=test\n1,0,-1,0.25\n";
        let ds = parse_dataset(text).unwrap();
        assert_eq!(ds.train[0].fine, None);
        assert!(ds.fine_labels(Split::Test).is_none());
        assert!(!ds.has_fine_labels());
    }

    #[test]
    fn imbalance_shrinks_later_coarse_classes() {
        let spec = HierarchySpec {
            num_coarse: 3,
            imbalance: 0.5,
            ..small_spec()
        };
        assert_eq!(spec.samples_for_coarse(0), 10);
        assert_eq!(spec.samples_for_coarse(2), 5);
        let ds = generate(&spec).unwrap();
        assert_eq!(ds.train.len() + ds.test.len(), 2 * (10 + 8 + 5));
    }
}
