//! Synthetic domain-shifted datasets, CSV persistence, and paired mini-batch
//! sampling.
//!
//! A target dataset keeps its labels so accuracy can be measured, but the
//! sampler hands training code an [`UnlabeledBatch`] with no labels attached.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::{LabeledBatch, UnlabeledBatch};
use crate::numerics::Matrix;
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Source => "source",
            Domain::Target => "target",
        }
    }
}

impl std::str::FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "source" => Ok(Domain::Source),
            "target" => Ok(Domain::Target),
            other => Err(Error::invalid(format!("unknown domain {other:?}"))),
        }
    }
}

/// Labeled samples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    inputs: Matrix,
    labels: Vec<usize>,
    num_categories: usize,
    domain: Domain,
}

impl Dataset {
    /// Checks that every category in `0..num_categories` occurs.
    pub fn new(inputs: Matrix, labels: Vec<usize>, num_categories: usize, domain: Domain) -> Result<Self> {
        if labels.len() != inputs.rows() {
            return Err(Error::shape(
                "Dataset",
                format!("{} labels for {} rows", labels.len(), inputs.rows()),
            ));
        }
        if num_categories < 2 {
            return Err(Error::invalid("a dataset needs at least 2 categories"));
        }
        let mut seen = vec![false; num_categories];
        for &y in &labels {
            if y >= num_categories {
                return Err(Error::invalid(format!("label {y} outside 0..{num_categories}")));
            }
            seen[y] = true;
        }
        if let Some(missing) = seen.iter().position(|&s| !s) {
            return Err(Error::invalid(format!("category {missing} has no samples")));
        }
        Ok(Dataset {
            inputs,
            labels,
            num_categories,
            domain,
        })
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    /// Ground-truth labels. For a target dataset these are for evaluation only.
    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_categories(&self) -> usize {
        self.num_categories
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.cols()
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn with_domain(mut self, domain: Domain) -> Self {
        self.domain = domain;
        self
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.num_categories];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }

    fn subset(&self, indices: &[usize]) -> Result<Dataset> {
        Dataset::new(
            self.inputs.select_rows(indices),
            indices.iter().map(|&i| self.labels[i]).collect(),
            self.num_categories,
            self.domain,
        )
    }

    fn shuffled(&self, rng: &mut impl Rng) -> Dataset {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(rng);
        Dataset {
            inputs: self.inputs.select_rows(&order),
            labels: order.iter().map(|&i| self.labels[i]).collect(),
            num_categories: self.num_categories,
            domain: self.domain,
        }
    }

    /// Stratified split into `(train, test)` with about `test_fraction` of each
    /// category held out.
    pub fn split_holdout(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) || test_fraction == 0.0 {
            return Err(Error::invalid(format!(
                "test fraction must lie in (0, 1), got {test_fraction}"
            )));
        }
        let mut rng = seed::stream(seed, "split");
        let mut train = Vec::new();
        let mut test = Vec::new();
        for k in 0..self.num_categories {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == k).collect();
            idx.shuffle(&mut rng);
            let n_test = ((idx.len() as f64) * test_fraction).round() as usize;
            if n_test == 0 || n_test == idx.len() {
                return Err(Error::invalid(format!(
                    "category {k} has {} samples, too few to split",
                    idx.len()
                )));
            }
            test.extend_from_slice(&idx[..n_test]);
            train.extend_from_slice(&idx[n_test..]);
        }
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&test)?))
    }

    /// Writes `x0,...,x{d-1},label,domain` with 17 significant digits.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for j in 0..self.input_dim() {
            let _ = write!(out, "x{j},");
        }
        out.push_str("label,domain\n");
        for (row, &y) in self.inputs.row_iter().zip(&self.labels) {
            for v in row {
                let _ = write!(out, "{},", format_f64(*v));
            }
            let _ = writeln!(out, "{y},{}", self.domain.as_str());
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, e))
    }

    /// Reads a file written by [`Dataset::save_csv`]; the category count is
    /// one more than the largest label.
    pub fn load_csv(path: &Path) -> Result<Dataset> {
        Self::load_csv_impl(path, None)
    }

    /// Like [`Dataset::load_csv`] but rejects labels outside `0..num_categories`.
    pub fn load_csv_with_categories(path: &Path, num_categories: usize) -> Result<Dataset> {
        Self::load_csv_impl(path, Some(num_categories))
    }

    fn load_csv_impl(path: &Path, expected_k: Option<usize>) -> Result<Dataset> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let parse_err = |line: usize, msg: String| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg,
        };
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| parse_err(1, "empty file".into()))?;
        let cols: Vec<&str> = header.split(',').collect();
        let d = cols.len().saturating_sub(2);
        let header_ok = cols.len() >= 3
            && cols[..d].iter().enumerate().all(|(j, c)| *c == format!("x{j}"))
            && cols[d] == "label"
            && cols[d + 1] == "domain";
        if !header_ok {
            return Err(parse_err(
                1,
                format!("expected header x0,...,x{{d-1}},label,domain, got {header:?}"),
            ));
        }

        let mut data = Vec::new();
        let mut labels = Vec::new();
        let mut domain = None;
        for (i, line) in lines {
            let lineno = i + 1;
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 2 {
                return Err(parse_err(
                    lineno,
                    format!("expected {} fields, found {}", d + 2, fields.len()),
                ));
            }
            for f in &fields[..d] {
                let v: f64 = f
                    .trim()
                    .parse()
                    .map_err(|_| parse_err(lineno, format!("bad number {f:?}")))?;
                if !v.is_finite() {
                    return Err(parse_err(lineno, format!("non-finite value {f:?}")));
                }
                data.push(v);
            }
            let y: usize = fields[d]
                .trim()
                .parse()
                .map_err(|_| parse_err(lineno, format!("bad label {:?}", fields[d])))?;
            if let Some(k) = expected_k {
                if y >= k {
                    return Err(parse_err(lineno, format!("label {y} outside 0..{k}")));
                }
            }
            labels.push(y);
            let dom: Domain = fields[d + 1]
                .trim()
                .parse()
                .map_err(|e: Error| parse_err(lineno, e.to_string()))?;
            match domain {
                None => domain = Some(dom),
                Some(prev) if prev != dom => {
                    return Err(parse_err(lineno, "mixed domains in one file".into()))
                }
                Some(_) => {}
            }
        }
        let domain = domain.ok_or_else(|| parse_err(2, "no data rows".into()))?;
        let k = expected_k.unwrap_or_else(|| labels.iter().max().map_or(0, |m| m + 1));
        let inputs = Matrix::from_vec(labels.len(), d, data)?;
        Dataset::new(inputs, labels, k, domain).map_err(|e| parse_err(0, e.to_string()))
    }
}

/// Shortest round-trip is not enough for byte-stable output across writers,
/// so values always carry 17 significant digits.
pub fn format_f64(v: f64) -> String {
    format!("{v:.16e}")
}

fn gaussian(std: f64) -> Result<Normal<f64>> {
    Normal::new(0.0, std).map_err(|e| Error::invalid(format!("noise std {std}: {e}")))
}

/// Two interleaving half circles of radius 1, centered on the origin.
///
/// Class 0 lies on the upper arc about (−0.5, −0.25), class 1 on the lower arc
/// about (0.5, 0.25). Arc positions are evenly spaced; Gaussian noise is added
/// afterwards and the rows are shuffled.
pub fn gen_two_moons(n: usize, noise_std: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::invalid(format!("two moons needs n >= 2, got {n}")));
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(Error::invalid(format!("noise std must be >= 0, got {noise_std}")));
    }
    let n_upper = n.div_ceil(2);
    let n_lower = n - n_upper;
    let arc = |count: usize, i: usize| {
        if count > 1 {
            std::f64::consts::PI * i as f64 / (count - 1) as f64
        } else {
            std::f64::consts::FRAC_PI_2
        }
    };
    let mut data = Vec::with_capacity(2 * n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n_upper {
        let t = arc(n_upper, i);
        data.extend([t.cos() - 0.5, t.sin() - 0.25]);
        labels.push(0);
    }
    for i in 0..n_lower {
        let t = arc(n_lower, i);
        data.extend([0.5 - t.cos(), 0.25 - t.sin()]);
        labels.push(1);
    }
    let mut rng = seed::stream(seed, "data.two_moons");
    let noise = gaussian(noise_std)?;
    for v in &mut data {
        *v += noise.sample(&mut rng);
    }
    let ds = Dataset::new(Matrix::from_vec(n, 2, data)?, labels, 2, Domain::Source)?;
    Ok(ds.shuffled(&mut rng))
}

/// Centers of K blobs on a cubic lattice with spacing `separation`, so every
/// pair is at least `separation` apart. Centered on the origin.
pub fn blob_centers(k: usize, d: usize, separation: f64) -> Matrix {
    let side = (1..).find(|s: &usize| s.pow(d.min(32) as u32) >= k).unwrap_or(k);
    let mut centers = Matrix::zeros(k, d);
    for c in 0..k {
        let mut rest = c;
        for j in 0..d {
            centers.set(c, j, (rest % side) as f64 * separation);
            rest /= side;
        }
    }
    let mean = centers.sum_cols().scale(1.0 / k as f64);
    Matrix::from_fn(k, d, |i, j| centers.get(i, j) - mean.get(0, j))
}

/// K balanced Gaussian clusters in `d` dimensions.
pub fn gen_blobs(
    k: usize,
    d: usize,
    n: usize,
    separation: f64,
    noise_std: f64,
    seed: u64,
) -> Result<Dataset> {
    if k < 2 || d < 2 || n < k {
        return Err(Error::invalid(format!(
            "blobs need K >= 2, d >= 2, n >= K (got K={k}, d={d}, n={n})"
        )));
    }
    if !separation.is_finite() || separation <= 0.0 {
        return Err(Error::invalid(format!(
            "separation must be positive, got {separation}"
        )));
    }
    if noise_std.is_nan() || noise_std < 0.0 {
        return Err(Error::invalid(format!("noise std must be >= 0, got {noise_std}")));
    }
    let centers = blob_centers(k, d, separation);
    let noise = gaussian(noise_std)?;
    let mut rng = seed::stream(seed, "data.blobs");
    let mut data = Vec::with_capacity(n * d);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let c = i % k;
        for j in 0..d {
            data.push(centers.get(c, j) + noise.sample(&mut rng));
        }
        labels.push(c);
    }
    let ds = Dataset::new(Matrix::from_vec(n, d, data)?, labels, k, Domain::Source)?;
    Ok(ds.shuffled(&mut rng))
}

/// A label-preserving covariate shift:
/// `x ↦ scale · R(rotation) · x + translation + ε`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ShiftSpec {
    /// Radians, applied to the first two coordinates.
    pub rotation: f64,
    /// Empty means no translation; otherwise one entry per input dimension.
    #[serde(default)]
    pub translation: Vec<f64>,
    pub scale: f64,
    pub noise_std: f64,
}

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec {
            rotation: 0.0,
            translation: Vec::new(),
            scale: 1.0,
            noise_std: 0.0,
        }
    }
}

impl ShiftSpec {
    pub fn rotation_degrees(degrees: f64) -> Self {
        ShiftSpec {
            rotation: degrees.to_radians(),
            ..ShiftSpec::default()
        }
    }

    pub fn validate(&self, input_dim: usize) -> Result<()> {
        if !self.scale.is_finite() || self.scale <= 0.0 {
            return Err(Error::invalid(format!(
                "shift scale must be > 0, got {}",
                self.scale
            )));
        }
        if self.noise_std.is_nan() || self.noise_std < 0.0 {
            return Err(Error::invalid("shift noise std must be >= 0"));
        }
        if !self.rotation.is_finite() {
            return Err(Error::invalid("shift rotation must be finite"));
        }
        if !self.translation.is_empty() && self.translation.len() != input_dim {
            return Err(Error::invalid(format!(
                "translation has {} entries for {input_dim}-dimensional inputs",
                self.translation.len()
            )));
        }
        if input_dim < 2 && self.rotation != 0.0 {
            return Err(Error::invalid("rotation needs at least 2 input dimensions"));
        }
        Ok(())
    }
}

/// Applies `spec` to every row and tags the result as the target domain.
pub fn apply_shift(ds: &Dataset, spec: &ShiftSpec, seed: u64) -> Result<Dataset> {
    let d = ds.input_dim();
    spec.validate(d)?;
    let (sin, cos) = spec.rotation.sin_cos();
    let noise = gaussian(spec.noise_std)?;
    let mut rng = seed::stream(seed, "data.shift");
    let mut out = ds.inputs.clone();
    for i in 0..out.rows() {
        if d >= 2 {
            let (x, y) = (out.get(i, 0), out.get(i, 1));
            out.set(i, 0, cos * x - sin * y);
            out.set(i, 1, sin * x + cos * y);
        }
        for j in 0..d {
            let mut v = spec.scale * out.get(i, j);
            if let Some(t) = spec.translation.get(j) {
                v += t;
            }
            if spec.noise_std > 0.0 {
                v += noise.sample(&mut rng);
            }
            out.set(i, j, v);
        }
    }
    Dataset::new(out, ds.labels.clone(), ds.num_categories, Domain::Target)
}

/// Draws paired source/target batches by walking a fresh shuffle of each
/// dataset. When fewer than `batch_size` unvisited rows remain, that dataset is
/// reshuffled and the walk restarts.
#[derive(Debug)]
pub struct PairSampler<'a> {
    src: &'a Dataset,
    tgt: &'a Dataset,
    batch_size: usize,
    src_order: Vec<usize>,
    src_pos: usize,
    tgt_order: Vec<usize>,
    tgt_pos: usize,
    rng: ChaCha8Rng,
}

impl<'a> PairSampler<'a> {
    pub fn new(src: &'a Dataset, tgt: &'a Dataset, batch_size: usize, rng: ChaCha8Rng) -> Result<Self> {
        if batch_size == 0 || batch_size > src.len().min(tgt.len()) {
            return Err(Error::invalid(format!(
                "batch size {batch_size} must be in 1..={} (smaller dataset)",
                src.len().min(tgt.len())
            )));
        }
        if src.input_dim() != tgt.input_dim() {
            return Err(Error::shape(
                "PairSampler",
                format!("source dim {} vs target dim {}", src.input_dim(), tgt.input_dim()),
            ));
        }
        let mut s = PairSampler {
            src,
            tgt,
            batch_size,
            src_order: (0..src.len()).collect(),
            src_pos: 0,
            tgt_order: (0..tgt.len()).collect(),
            tgt_pos: 0,
            rng,
        };
        s.src_order.shuffle(&mut s.rng);
        s.tgt_order.shuffle(&mut s.rng);
        Ok(s)
    }

    /// Steps per epoch: enough batches to cover the larger dataset once.
    pub fn steps_per_epoch(&self) -> usize {
        (self.src.len().max(self.tgt.len()) / self.batch_size).max(1)
    }

    fn take(order: &mut [usize], pos: &mut usize, b: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        if *pos + b > order.len() {
            order.shuffle(rng);
            *pos = 0;
        }
        let out = order[*pos..*pos + b].to_vec();
        *pos += b;
        out
    }

    /// Source row indices and target row indices of the next pair.
    pub fn next_indices(&mut self) -> (Vec<usize>, Vec<usize>) {
        let s = Self::take(
            &mut self.src_order,
            &mut self.src_pos,
            self.batch_size,
            &mut self.rng,
        );
        let t = Self::take(
            &mut self.tgt_order,
            &mut self.tgt_pos,
            self.batch_size,
            &mut self.rng,
        );
        (s, t)
    }

    pub fn next_pair(&mut self) -> (LabeledBatch, UnlabeledBatch) {
        let (s, t) = self.next_indices();
        let src = LabeledBatch {
            inputs: self.src.inputs.select_rows(&s),
            labels: s.iter().map(|&i| self.src.labels[i]).collect(),
        };
        let tgt = UnlabeledBatch {
            inputs: self.tgt.inputs.select_rows(&t),
        };
        (src, tgt)
    }
}

/// One paired draw without replacement within each dataset.
pub fn sample_pair(
    src: &Dataset,
    tgt: &Dataset,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(LabeledBatch, UnlabeledBatch)> {
    let sub = ChaCha8Rng::from_rng(rng);
    Ok(PairSampler::new(src, tgt, batch_size, sub)?.next_pair())
}
