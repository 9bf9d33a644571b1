//! Network components: the feature extractor `G`, the two task heads `Cs` and
//! `Ct`, and the logistic domain discriminator used by the confusion baseline.
//!
//! The constructed 2K-way classifier owns no parameters. It is the softmax of
//! `[v_s | v_t]`, the concatenated logits of the two task heads, so training it
//! means training `Cs` and `Ct`.
//!
//! Dense weights are stored out×in (one row per output unit), so a layer maps a
//! batch `x` to `x · Wᵀ + b`.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::numerics::{matmul_transposed, sigmoid, softmax_rows, Matrix};
use crate::seed;

/// Layer widths of a network.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dim: usize,
    #[serde(default = "default_hidden")]
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_categories: usize,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

impl ModelConfig {
    pub fn new(input_dim: usize, feature_dim: usize, num_categories: usize) -> Self {
        ModelConfig {
            input_dim,
            hidden_dims: default_hidden(),
            feature_dim,
            num_categories,
        }
    }

    pub fn with_hidden(mut self, hidden_dims: Vec<usize>) -> Self {
        self.hidden_dims = hidden_dims;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.feature_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::invalid(format!("all layer widths must be >= 1: {self:?}")));
        }
        if self.num_categories < 2 {
            return Err(Error::invalid(format!(
                "need at least 2 categories, got {}",
                self.num_categories
            )));
        }
        Ok(())
    }

    /// (in, out) widths of every layer of `G`, the last one producing features.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

/// A fully connected layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// out×in
    pub weight: Matrix,
    /// 1×out
    pub bias: Matrix,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weight: Matrix::zeros(output, input),
            bias: Matrix::zeros(1, output),
        }
    }

    /// He-normal weights (σ = √(2 / fan_in)), zero bias.
    pub fn he_normal(input: usize, output: usize, rng: &mut impl Rng) -> Self {
        let normal = Normal::new(0.0, (2.0 / input as f64).sqrt()).expect("finite std");
        Dense {
            weight: Matrix::from_fn(output, input, |_, _| normal.sample(rng)),
            bias: Matrix::zeros(1, output),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        matmul_transposed(x, &self.weight)?.add_row_broadcast(&self.bias)
    }

    fn record(tape: &mut Tape, weight: Var, bias: Var, x: Var) -> Result<Var> {
        let z = tape.matmul_transposed(x, weight)?;
        tape.add_row(z, bias)
    }
}

/// Access to trainable matrices in a fixed order.
///
/// The same order is used for binding to a tape, for gradients, and for
/// optimizer state, so the three line up by index.
pub trait Parameters {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;

    /// Records every parameter as a tape leaf.
    fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params().into_iter().map(|p| tape.leaf(p.clone())).collect()
    }
}

/// The feature extractor `G`: dense layers with ReLU after every one,
/// including the last.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureExtractor {
    pub layers: Vec<Dense>,
}

impl FeatureExtractor {
    pub fn input_dim(&self) -> usize {
        self.layers[0].input_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layers.last().expect("at least one layer").output_dim()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        if x.cols() != self.input_dim() {
            return Err(Error::shape(
                "forward_features",
                format!("input has {} columns, G expects {}", x.cols(), self.input_dim()),
            ));
        }
        let mut h = x.clone();
        for layer in &self.layers {
            h = layer.forward(&h)?.map(|v| v.max(0.0));
        }
        Ok(h)
    }

    /// Records the forward pass given leaves from [`Parameters::bind`].
    pub fn record(&self, tape: &mut Tape, bound: &[Var], x: Var) -> Result<Var> {
        if tape.value(x).cols() != self.input_dim() {
            return Err(Error::shape(
                "forward_features",
                format!(
                    "input has {} columns, G expects {}",
                    tape.value(x).cols(),
                    self.input_dim()
                ),
            ));
        }
        let mut h = x;
        for pair in bound.chunks_exact(2) {
            let z = Dense::record(tape, pair[0], pair[1], h)?;
            h = tape.relu(z);
        }
        Ok(h)
    }
}

impl Parameters for FeatureExtractor {
    fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }
}

/// Convenience wrapper for [`FeatureExtractor::forward`].
pub fn forward_features(g: &FeatureExtractor, x: &Matrix) -> Result<Matrix> {
    g.forward(x)
}

/// A single dense layer producing K logits.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub layer: Dense,
}

impl ClassifierHead {
    pub fn num_categories(&self) -> usize {
        self.layer.output_dim()
    }

    pub fn feature_dim(&self) -> usize {
        self.layer.input_dim()
    }

    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.feature_dim() {
            return Err(Error::shape(
                "logits",
                format!(
                    "features have {} columns, head expects {}",
                    features.cols(),
                    self.feature_dim()
                ),
            ));
        }
        self.layer.forward(features)
    }

    pub fn record(tape: &mut Tape, bound: &[Var], features: Var) -> Result<Var> {
        Dense::record(tape, bound[0], bound[1], features)
    }
}

impl Parameters for ClassifierHead {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.layer.weight, &self.layer.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }
}

/// `f · Wᵀ + b` for one head.
pub fn logits(head: &ClassifierHead, features: &Matrix) -> Result<Matrix> {
    head.logits(features)
}

/// Logistic domain discriminator: the probability that a feature row comes
/// from the target domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainDiscriminator {
    /// 1×d weight, 1×1 bias.
    pub layer: Dense,
}

impl DomainDiscriminator {
    /// Raw scores (B×1) before the logistic function.
    pub fn scores(&self, features: &Matrix) -> Result<Matrix> {
        self.layer.forward(features)
    }

    /// D(f) ∈ (0, 1) per row.
    pub fn predict(&self, features: &Matrix) -> Result<Matrix> {
        Ok(self.scores(features)?.map(sigmoid))
    }

    pub fn record(tape: &mut Tape, bound: &[Var], features: Var) -> Result<Var> {
        Dense::record(tape, bound[0], bound[1], features)
    }
}

impl Parameters for DomainDiscriminator {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.layer.weight, &self.layer.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.layer.weight, &mut self.layer.bias]
    }
}

/// `p^st`: softmax over the concatenated 2K logits `[v_s | v_t]`.
///
/// Columns `0..K` belong to the source head, `K..2K` to the target head.
pub fn concat_probs(v_s: &Matrix, v_t: &Matrix) -> Result<Matrix> {
    if v_s.shape() != v_t.shape() {
        return Err(Error::shape(
            "concat_probs",
            format!("{:?} vs {:?}", v_s.shape(), v_t.shape()),
        ));
    }
    Ok(softmax_rows(&v_s.concat_cols(v_t)?))
}

fn half_width(p_st: &Matrix, op: &'static str) -> Result<usize> {
    if !p_st.cols().is_multiple_of(2) || p_st.cols() == 0 {
        return Err(Error::shape(
            op,
            format!("expected an even, nonzero column count, got {}", p_st.cols()),
        ));
    }
    Ok(p_st.cols() / 2)
}

/// `q_k = p^st_k + p^st_{k+K}`, the category distribution with domains merged.
pub fn category_marginal(p_st: &Matrix) -> Result<Matrix> {
    let k = half_width(p_st, "category_marginal")?;
    Ok(Matrix::from_fn(p_st.rows(), k, |i, j| {
        p_st.get(i, j) + p_st.get(i, j + k)
    }))
}

/// Total mass on the source half and on the target half of `p^st`, per row.
pub fn domain_mass(p_st: &Matrix) -> Result<(Vec<f64>, Vec<f64>)> {
    let k = half_width(p_st, "domain_mass")?;
    Ok(p_st
        .row_iter()
        .map(|r| (r[..k].iter().sum::<f64>(), r[k..].iter().sum::<f64>()))
        .unzip())
}

/// Picks which classifier to read predictions from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Head {
    /// Source task classifier of a SymNet.
    Cs,
    /// Target task classifier of a SymNet.
    Ct,
    /// The single task classifier of a baseline network.
    C,
}

impl Head {
    pub fn as_str(self) -> &'static str {
        match self {
            Head::Cs => "Cs",
            Head::Ct => "Ct",
            Head::C => "C",
        }
    }
}

impl std::str::FromStr for Head {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "cs" => Ok(Head::Cs),
            "ct" => Ok(Head::Ct),
            "c" => Ok(Head::C),
            other => Err(Error::invalid(format!("unknown head {other:?} (cs, ct, c)"))),
        }
    }
}

/// Anything that maps inputs to features and exposes task heads.
pub trait Predictor {
    fn features(&self, x: &Matrix) -> Result<Matrix>;
    fn head(&self, which: Head) -> Option<&ClassifierHead>;
}

fn init_extractor(config: &ModelConfig, rng: &mut impl Rng) -> FeatureExtractor {
    FeatureExtractor {
        layers: config
            .layer_dims()
            .into_iter()
            .map(|(i, o)| Dense::he_normal(i, o, rng))
            .collect(),
    }
}

fn init_head(config: &ModelConfig, rng: &mut impl Rng) -> ClassifierHead {
    ClassifierHead {
        layer: Dense::he_normal(config.feature_dim, config.num_categories, rng),
    }
}

/// Feature extractor plus the two symmetric task heads.
#[derive(Debug, Clone, PartialEq)]
pub struct SymNet {
    pub g: FeatureExtractor,
    pub cs: ClassifierHead,
    pub ct: ClassifierHead,
}

impl SymNet {
    /// He-initialized network. Each component draws from its own seed stream,
    /// so `G` here matches `G` of a [`BaselineNet`] built from the same seed.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(SymNet {
            g: init_extractor(config, &mut seed::stream(seed, "init.g")),
            cs: init_head(config, &mut seed::stream(seed, "init.cs")),
            ct: init_head(config, &mut seed::stream(seed, "init.ct")),
        })
    }

    /// All parameters zero.
    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let head = ClassifierHead {
            layer: Dense::zeros(config.feature_dim, config.num_categories),
        };
        Ok(SymNet {
            g: FeatureExtractor {
                layers: config
                    .layer_dims()
                    .into_iter()
                    .map(|(i, o)| Dense::zeros(i, o))
                    .collect(),
            },
            cs: head.clone(),
            ct: head,
        })
    }

    pub fn config(&self) -> ModelConfig {
        let dims: Vec<usize> = self.g.layers.iter().map(Dense::output_dim).collect();
        ModelConfig {
            input_dim: self.g.input_dim(),
            hidden_dims: dims[..dims.len() - 1].to_vec(),
            feature_dim: self.g.feature_dim(),
            num_categories: self.cs.num_categories(),
        }
    }

    /// `(v_s, v_t)` for a batch of inputs.
    pub fn head_logits(&self, x: &Matrix) -> Result<(Matrix, Matrix)> {
        let f = self.g.forward(x)?;
        Ok((self.cs.logits(&f)?, self.ct.logits(&f)?))
    }

    /// `p^st` for a batch of inputs.
    pub fn joint_probs(&self, x: &Matrix) -> Result<Matrix> {
        let (vs, vt) = self.head_logits(x)?;
        concat_probs(&vs, &vt)
    }

    pub fn to_checkpoint(&self) -> BTreeMap<String, Matrix> {
        let mut map = extractor_entries(&self.g);
        head_entries(&mut map, "Cs", &self.cs.layer);
        head_entries(&mut map, "Ct", &self.ct.layer);
        map
    }

    pub fn from_checkpoint(map: &BTreeMap<String, Matrix>) -> Result<Self> {
        let net = SymNet {
            g: extractor_from(map)?,
            cs: ClassifierHead {
                layer: dense_from(map, "Cs")?,
            },
            ct: ClassifierHead {
                layer: dense_from(map, "Ct")?,
            },
        };
        check_head(&net.g, &net.cs.layer, "Cs")?;
        check_head(&net.g, &net.ct.layer, "Ct")?;
        if net.cs.num_categories() != net.ct.num_categories() {
            return Err(Error::invalid("Cs and Ct disagree on the number of categories"));
        }
        Ok(net)
    }
}

impl Predictor for SymNet {
    fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.g.forward(x)
    }

    fn head(&self, which: Head) -> Option<&ClassifierHead> {
        match which {
            Head::Cs => Some(&self.cs),
            Head::Ct => Some(&self.ct),
            Head::C => None,
        }
    }
}

/// Builds a SymNet with He initialization. See [`SymNet::init`].
pub fn init_params(config: &ModelConfig, seed: u64) -> Result<SymNet> {
    SymNet::init(config, seed)
}

/// Single-head network used by the source-only and domain-confusion baselines.
#[derive(Debug, Clone, PartialEq)]
pub struct BaselineNet {
    pub g: FeatureExtractor,
    pub head: ClassifierHead,
    pub disc: DomainDiscriminator,
}

impl BaselineNet {
    /// `G` and the task head share seed streams with [`SymNet::init`]'s `G`
    /// and `Cs`.
    pub fn init(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        Ok(BaselineNet {
            g: init_extractor(config, &mut seed::stream(seed, "init.g")),
            head: init_head(config, &mut seed::stream(seed, "init.cs")),
            disc: DomainDiscriminator {
                layer: Dense::he_normal(config.feature_dim, 1, &mut seed::stream(seed, "init.d")),
            },
        })
    }

    pub fn config(&self) -> ModelConfig {
        let dims: Vec<usize> = self.g.layers.iter().map(Dense::output_dim).collect();
        ModelConfig {
            input_dim: self.g.input_dim(),
            hidden_dims: dims[..dims.len() - 1].to_vec(),
            feature_dim: self.g.feature_dim(),
            num_categories: self.head.num_categories(),
        }
    }

    pub fn to_checkpoint(&self) -> BTreeMap<String, Matrix> {
        let mut map = extractor_entries(&self.g);
        head_entries(&mut map, "C", &self.head.layer);
        head_entries(&mut map, "D", &self.disc.layer);
        map
    }

    pub fn from_checkpoint(map: &BTreeMap<String, Matrix>) -> Result<Self> {
        let net = BaselineNet {
            g: extractor_from(map)?,
            head: ClassifierHead {
                layer: dense_from(map, "C")?,
            },
            disc: DomainDiscriminator {
                layer: dense_from(map, "D")?,
            },
        };
        check_head(&net.g, &net.head.layer, "C")?;
        check_head(&net.g, &net.disc.layer, "D")?;
        Ok(net)
    }
}

impl Predictor for BaselineNet {
    fn features(&self, x: &Matrix) -> Result<Matrix> {
        self.g.forward(x)
    }

    fn head(&self, which: Head) -> Option<&ClassifierHead> {
        (which == Head::C).then_some(&self.head)
    }
}

/// A trained network of either kind, as stored in a checkpoint file.
#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    SymNet(SymNet),
    Baseline(BaselineNet),
}

impl Network {
    pub fn to_checkpoint(&self) -> BTreeMap<String, Matrix> {
        match self {
            Network::SymNet(n) => n.to_checkpoint(),
            Network::Baseline(n) => n.to_checkpoint(),
        }
    }

    /// Decodes a key→matrix map; the presence of `Cs.W` selects a SymNet.
    pub fn from_checkpoint(map: &BTreeMap<String, Matrix>) -> Result<Self> {
        if map.contains_key("Cs.W") {
            SymNet::from_checkpoint(map).map(Network::SymNet)
        } else {
            BaselineNet::from_checkpoint(map).map(Network::Baseline)
        }
    }

    pub fn config(&self) -> ModelConfig {
        match self {
            Network::SymNet(n) => n.config(),
            Network::Baseline(n) => n.config(),
        }
    }

    /// The head whose accuracy is reported by default.
    pub fn default_head(&self) -> Head {
        match self {
            Network::SymNet(_) => Head::Ct,
            Network::Baseline(_) => Head::C,
        }
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_checkpoint()).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let map: BTreeMap<String, Matrix> = serde_json::from_str(&text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        Network::from_checkpoint(&map)
    }
}

impl Predictor for Network {
    fn features(&self, x: &Matrix) -> Result<Matrix> {
        match self {
            Network::SymNet(n) => n.features(x),
            Network::Baseline(n) => n.features(x),
        }
    }

    fn head(&self, which: Head) -> Option<&ClassifierHead> {
        match self {
            Network::SymNet(n) => n.head(which),
            Network::Baseline(n) => n.head(which),
        }
    }
}

fn extractor_entries(g: &FeatureExtractor) -> BTreeMap<String, Matrix> {
    let mut map = BTreeMap::new();
    for (i, layer) in g.layers.iter().enumerate() {
        map.insert(format!("G.layer{i}.W"), layer.weight.clone());
        map.insert(format!("G.layer{i}.b"), layer.bias.clone());
    }
    map
}

fn head_entries(map: &mut BTreeMap<String, Matrix>, prefix: &str, layer: &Dense) {
    map.insert(format!("{prefix}.W"), layer.weight.clone());
    map.insert(format!("{prefix}.b"), layer.bias.clone());
}

fn dense_from(map: &BTreeMap<String, Matrix>, prefix: &str) -> Result<Dense> {
    let get = |suffix: &str| {
        map.get(&format!("{prefix}.{suffix}"))
            .cloned()
            .ok_or_else(|| Error::invalid(format!("checkpoint is missing {prefix}.{suffix}")))
    };
    let layer = Dense {
        weight: get("W")?,
        bias: get("b")?,
    };
    if layer.bias.shape() != (1, layer.weight.rows()) {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "{prefix}.b is {:?} but {prefix}.W is {:?}",
                layer.bias.shape(),
                layer.weight.shape()
            ),
        ));
    }
    Ok(layer)
}

fn extractor_from(map: &BTreeMap<String, Matrix>) -> Result<FeatureExtractor> {
    let mut layers = Vec::new();
    while map.contains_key(&format!("G.layer{}.W", layers.len())) {
        let layer = dense_from(map, &format!("G.layer{}", layers.len()))?;
        if let Some(prev) = layers.last().map(Dense::output_dim) {
            if layer.input_dim() != prev {
                return Err(Error::shape(
                    "checkpoint",
                    format!(
                        "G.layer{} takes {} inputs after a {prev}-wide layer",
                        layers.len(),
                        layer.input_dim()
                    ),
                ));
            }
        }
        layers.push(layer);
    }
    if layers.is_empty() {
        return Err(Error::invalid("checkpoint has no G.layer0.W"));
    }
    Ok(FeatureExtractor { layers })
}

fn check_head(g: &FeatureExtractor, layer: &Dense, name: &str) -> Result<()> {
    if layer.input_dim() != g.feature_dim() {
        return Err(Error::shape(
            "checkpoint",
            format!(
                "{name} takes {} inputs, G emits {}",
                layer.input_dim(),
                g.feature_dim()
            ),
        ));
    }
    Ok(())
}
