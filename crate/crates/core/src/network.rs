//! Multitask residual network: a spectral 1×1 stem (shared or per task), a
//! residual trunk shared by all tasks, and one softmax head per task.
//!
//! ```text
//! patch B×P×P×C ─ stem: conv1×1 → BN → ReLU
//!               ─ trunk: N × [conv3×3 → BN → ReLU → conv3×3 → BN → (+x) → ReLU]
//!               ─ global average pool → dense → ReLU      = features B×F
//!               ─ head(task): dense F→K                   = logits B×K
//! ```

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::AlignmentSpec;
use crate::error::{Error, Result};
use crate::tensor::{
    ops, BnMode, BnState, Differentiable, ParamId, ParamStore, Scalar, Tape, Tensor, Var,
};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub patch_size: usize,
    pub stem_channels: usize,
    pub num_residual_blocks: usize,
    pub feature_dim: usize,
}

impl Default for ArchConfig {
    fn default() -> Self {
        ArchConfig {
            patch_size: 9,
            stem_channels: 64,
            num_residual_blocks: 2,
            feature_dim: 128,
        }
    }
}

impl ArchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size < 3 || self.patch_size % 2 == 0 {
            return Err(Error::Config(format!(
                "patch_size must be odd and at least 3, got {}",
                self.patch_size
            )));
        }
        if self.stem_channels == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "stem_channels and feature_dim must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Identity of one classification task as seen by the network.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TaskSpec {
    pub id: String,
    pub num_classes: usize,
    /// Channel count after alignment.
    pub input_channels: usize,
    pub alignment: AlignmentSpec,
}

impl TaskSpec {
    pub fn new(id: impl Into<String>, num_classes: usize, input_channels: usize) -> Self {
        TaskSpec {
            id: id.into(),
            num_classes,
            input_channels,
            alignment: AlignmentSpec::default(),
        }
    }

    pub fn with_alignment(mut self, alignment: AlignmentSpec) -> Self {
        self.alignment = alignment;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Infer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct ConvBn {
    kernel: ParamId,
    gamma: ParamId,
    beta: ParamId,
    bn: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResidualBlock {
    first: ConvBn,
    second: ConvBn,
}

/// Batch-norm running statistics, mutable only while training.
pub enum BnBank<'a, T: Scalar> {
    Train(&'a mut [BnState<T>]),
    Infer(&'a [BnState<T>]),
}

impl<T: Scalar> BnBank<'_, T> {
    fn mode(&mut self, i: usize) -> BnMode<'_, T> {
        match self {
            BnBank::Train(s) => BnMode::Train(&mut s[i]),
            BnBank::Infer(s) => BnMode::Infer(&s[i]),
        }
    }
}

fn conv_bn<T: Scalar>(
    tape: &mut Tape<T>,
    params: &ParamStore<T>,
    bank: &mut BnBank<'_, T>,
    layer: ConvBn,
    x: Var,
) -> Result<Var> {
    let k = tape.param(params, layer.kernel);
    let y = tape.conv2d(x, k, None)?;
    let (g, b) = (tape.param(params, layer.gamma), tape.param(params, layer.beta));
    tape.batch_norm(y, g, b, bank.mode(layer.bn))
}

impl ResidualBlock {
    /// `relu(BN(conv(relu(BN(conv(x))))) + x)`.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        bank: &mut BnBank<'_, T>,
        x: Var,
    ) -> Result<Var> {
        let h = conv_bn(tape, params, bank, self.first, x)?;
        let h = tape.relu(h);
        let h = conv_bn(tape, params, bank, self.second, h)?;
        let s = tape.add(h, x)?;
        Ok(tape.relu(s))
    }

    fn param_ids(&self) -> [ParamId; 6] {
        [
            self.first.kernel,
            self.first.gamma,
            self.first.beta,
            self.second.kernel,
            self.second.gamma,
            self.second.beta,
        ]
    }
}

/// Maps stem activations `B×H×W×S` to feature vectors `B×F`. Implemented by
/// the residual trunk; other backbones can slot in behind the same surface.
pub trait FeatureExtractor {
    fn extract<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        bank: &mut BnBank<'_, T>,
        x: Var,
    ) -> Result<Var>;

    fn output_dim(&self) -> usize;

    fn param_ids(&self) -> Vec<ParamId>;
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ResidualTrunk {
    blocks: Vec<ResidualBlock>,
    feature: DenseLayer,
    feature_dim: usize,
}

impl FeatureExtractor for ResidualTrunk {
    fn extract<T: Scalar>(
        &self,
        tape: &mut Tape<T>,
        params: &ParamStore<T>,
        bank: &mut BnBank<'_, T>,
        x: Var,
    ) -> Result<Var> {
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(tape, params, bank, h)?;
        }
        let pooled = tape.global_avg_pool(h)?;
        let (w, b) = (
            tape.param(params, self.feature.weight),
            tape.param(params, self.feature.bias),
        );
        let f = tape.dense(pooled, w, b)?;
        Ok(tape.relu(f))
    }

    fn output_dim(&self) -> usize {
        self.feature_dim
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.blocks.iter().flat_map(|b| b.param_ids()).collect();
        ids.extend([self.feature.weight, self.feature.bias]);
        ids
    }
}

/// Shared extractor plus per-task heads, with optional per-task stems.
#[derive(Clone, Debug, PartialEq)]
pub struct MultitaskNet<T: Scalar = f32> {
    arch: ArchConfig,
    layout: Layout,
    params: ParamStore<T>,
    bn: Vec<BnState<T>>,
}

/// Parameter topology: which ids form each stem, the trunk, and each head.
#[derive(Clone, Debug, PartialEq)]
struct Layout {
    tasks: Vec<TaskSpec>,
    share_first_conv: bool,
    stems: Vec<ConvBn>,
    trunk: ResidualTrunk,
    heads: Vec<DenseLayer>,
}

impl Layout {
    fn task_index(&self, task_id: &str) -> Result<usize> {
        self.tasks
            .iter()
            .position(|t| t.id == task_id)
            .ok_or_else(|| Error::UnknownTask(task_id.to_string()))
    }

    fn stem_for(&self, task: usize) -> ConvBn {
        if self.share_first_conv {
            self.stems[0]
        } else {
            self.stems[task]
        }
    }

    fn features<T: Scalar>(
        &self,
        params: &ParamStore<T>,
        bank: &mut BnBank<'_, T>,
        tape: &mut Tape<T>,
        batch: Var,
        task: usize,
    ) -> Result<Var> {
        let shape = tape.value(batch).shape();
        let expected = self.tasks[task].input_channels;
        if shape.len() != 4 || shape[3] != expected {
            return Err(Error::Shape(format!(
                "task `{}` expects B×P×P×{expected} patches, got {shape:?}",
                self.tasks[task].id
            )));
        }
        let h = conv_bn(tape, params, bank, self.stem_for(task), batch)?;
        let h = tape.relu(h);
        self.trunk.extract(tape, params, bank, h)
    }
}

struct Builder<'a, T: Scalar> {
    params: ParamStore<T>,
    bn: Vec<BnState<T>>,
    rng: &'a mut ChaCha8Rng,
}

impl<T: Scalar> Builder<'_, T> {
    fn he(&mut self, name: String, shape: &[usize], fan_in: usize) -> ParamId {
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive fan-in");
        let len: usize = shape.iter().product();
        let data: Vec<f64> = (0..len).map(|_| normal.sample(self.rng)).collect();
        self.params
            .add(name, Tensor::from_f64(shape, &data).expect("shape matches"))
    }

    fn conv_bn(&mut self, name: &str, k: usize, cin: usize, cout: usize) -> ConvBn {
        let kernel = self.he(format!("{name}/kernel"), &[k, k, cin, cout], k * k * cin);
        let gamma = self.params.add(format!("{name}/gamma"), Tensor::full(&[cout], T::one()));
        let beta = self.params.add(format!("{name}/beta"), Tensor::zeros(&[cout]));
        self.bn.push(BnState::new(cout));
        ConvBn {
            kernel,
            gamma,
            beta,
            bn: self.bn.len() - 1,
        }
    }

    fn dense(&mut self, name: &str, din: usize, dout: usize) -> DenseLayer {
        DenseLayer {
            weight: self.he(format!("{name}/weight"), &[din, dout], din),
            bias: self.params.add(format!("{name}/bias"), Tensor::zeros(&[dout])),
        }
    }
}

/// Builds a network for `tasks`; a single task gives the plain single-task CNN.
pub fn build_network(
    tasks: &[TaskSpec],
    arch: &ArchConfig,
    share_first_conv: bool,
    seed: u64,
) -> Result<MultitaskNet<f32>> {
    MultitaskNet::build(tasks, arch, share_first_conv, seed)
}

impl<T: Scalar> MultitaskNet<T> {
    pub fn build(tasks: &[TaskSpec], arch: &ArchConfig, share_first_conv: bool, seed: u64) -> Result<Self> {
        validate_tasks(tasks, share_first_conv)?;
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            params: ParamStore::new(),
            bn: Vec::new(),
            rng: &mut rng,
        };
        let s = arch.stem_channels;
        let stems = if share_first_conv {
            vec![b.conv_bn("stem/shared", 1, tasks[0].input_channels, s)]
        } else {
            tasks
                .iter()
                .map(|t| b.conv_bn(&format!("stem/{}", t.id), 1, t.input_channels, s))
                .collect()
        };
        let blocks = (0..arch.num_residual_blocks)
            .map(|i| ResidualBlock {
                first: b.conv_bn(&format!("trunk/block{i}/conv1"), 3, s, s),
                second: b.conv_bn(&format!("trunk/block{i}/conv2"), 3, s, s),
            })
            .collect();
        let feature = b.dense("trunk/feature", s, arch.feature_dim);
        let heads = tasks
            .iter()
            .map(|t| b.dense(&format!("head/{}", t.id), arch.feature_dim, t.num_classes))
            .collect();
        Ok(MultitaskNet {
            arch: arch.clone(),
            layout: Layout {
                tasks: tasks.to_vec(),
                share_first_conv,
                stems,
                trunk: ResidualTrunk {
                    blocks,
                    feature,
                    feature_dim: arch.feature_dim,
                },
                heads,
            },
            params: b.params,
            bn: b.bn,
        })
    }

    /// Rebuilds the layout for `tasks` and installs stored values, checking
    /// every shape against the layout.
    pub fn from_parts(
        arch: &ArchConfig,
        tasks: &[TaskSpec],
        share_first_conv: bool,
        params: ParamStore<T>,
        bn: Vec<BnState<T>>,
    ) -> Result<Self> {
        let mut net = Self::build(tasks, arch, share_first_conv, 0)?;
        if params.len() != net.params.len() || bn.len() != net.bn.len() {
            return Err(Error::Shape(format!(
                "stored network has {} parameters and {} norm layers, layout expects {} and {}",
                params.len(),
                bn.len(),
                net.params.len(),
                net.bn.len()
            )));
        }
        for ((_, name, expected), (_, got_name, got)) in net.params.iter().zip(params.iter()) {
            if expected.shape() != got.shape() || name != got_name {
                return Err(Error::Shape(format!(
                    "parameter `{got_name}` {:?} does not match layout `{name}` {:?}",
                    got.shape(),
                    expected.shape()
                )));
            }
        }
        for (expected, got) in net.bn.iter().zip(&bn) {
            if expected.channels() != got.channels() || got.var.len() != got.channels() {
                return Err(Error::Shape("batch-norm statistics do not match layout".into()));
            }
        }
        net.params = params;
        net.bn = bn;
        Ok(net)
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn tasks(&self) -> &[TaskSpec] {
        &self.layout.tasks
    }

    pub fn share_first_conv(&self) -> bool {
        self.layout.share_first_conv
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn bn_states(&self) -> &[BnState<T>] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState<T>] {
        &mut self.bn
    }

    pub fn num_stems(&self) -> usize {
        self.layout.stems.len()
    }

    pub fn num_heads(&self) -> usize {
        self.layout.heads.len()
    }

    pub fn task_index(&self, task_id: &str) -> Result<usize> {
        self.layout.task_index(task_id)
    }

    pub fn head(&self, task_id: &str) -> Result<DenseLayer> {
        Ok(self.layout.heads[self.task_index(task_id)?])
    }

    pub fn head_param_ids(&self, task_id: &str) -> Result<Vec<ParamId>> {
        let h = self.head(task_id)?;
        Ok(vec![h.weight, h.bias])
    }

    pub fn stem_param_ids(&self, task_id: &str) -> Result<Vec<ParamId>> {
        let s = self.layout.stem_for(self.task_index(task_id)?);
        Ok(vec![s.kernel, s.gamma, s.beta])
    }

    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        self.layout.trunk.param_ids()
    }

    /// Stem and trunk parameters that compute this task's features.
    pub fn extractor_param_ids(&self, task_id: &str) -> Result<Vec<ParamId>> {
        let mut ids = self.stem_param_ids(task_id)?;
        ids.extend(self.trunk_param_ids());
        Ok(ids)
    }

    /// Head parameter count, `(feature_dim + 1) × K`.
    pub fn head_param_count(&self, task_id: &str) -> Result<usize> {
        Ok(self
            .head_param_ids(task_id)?
            .iter()
            .map(|&id| self.params.get(id).len())
            .sum())
    }

    /// Native-endian bytes of the parameters computing this task's features.
    pub fn extractor_bytes(&self, task_id: &str) -> Result<Vec<u8>> {
        Ok(self.param_bytes(&self.extractor_param_ids(task_id)?))
    }

    pub fn param_bytes(&self, ids: &[ParamId]) -> Vec<u8> {
        ids.iter()
            .flat_map(|&id| self.params.get(id).data().iter())
            .flat_map(|v| v.as_f64().to_le_bytes())
            .collect()
    }

    /// Feature vectors `B×feature_dim` for a batch of patches.
    pub fn forward_features(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        task_id: &str,
        mode: Mode,
    ) -> Result<Var> {
        let task = self.task_index(task_id)?;
        let x = tape.input(batch.clone());
        let mut bank = match mode {
            Mode::Train => BnBank::Train(&mut self.bn),
            Mode::Infer => BnBank::Infer(&self.bn),
        };
        self.layout.features(&self.params, &mut bank, tape, x, task)
    }

    /// Logits `B×K` of the task's head.
    pub fn forward_logits(&self, tape: &mut Tape<T>, features: Var, task_id: &str) -> Result<Var> {
        let head = self.head(task_id)?;
        let (w, b) = (tape.param(&self.params, head.weight), tape.param(&self.params, head.bias));
        tape.dense(features, w, b)
    }

    /// Mean cross-entropy of the task's softmax classifier on a batch.
    pub fn loss(
        &mut self,
        tape: &mut Tape<T>,
        batch: &Tensor<T>,
        labels: &[usize],
        task_id: &str,
        mode: Mode,
    ) -> Result<Var> {
        let f = self.forward_features(tape, batch, task_id, mode)?;
        let logits = self.forward_logits(tape, f, task_id)?;
        tape.softmax_cross_entropy(logits, labels)
    }

    /// Inference-mode features, without touching running statistics.
    pub fn infer_features(&self, batch: &Tensor<T>, task_id: &str) -> Result<Tensor<T>> {
        let task = self.task_index(task_id)?;
        let mut tape = Tape::new();
        let x = tape.input(batch.clone());
        let mut bank = BnBank::Infer(&self.bn);
        let f = self.layout.features(&self.params, &mut bank, &mut tape, x, task)?;
        Ok(tape.value(f).clone())
    }

    /// Inference-mode class probabilities `B×K`.
    pub fn predict_proba(&self, batch: &Tensor<T>, task_id: &str) -> Result<Tensor<T>> {
        let features = self.infer_features(batch, task_id)?;
        let head = self.head(task_id)?;
        let logits = ops::dense(&features, self.params.get(head.weight), self.params.get(head.bias))?;
        ops::softmax(&logits)
    }

    pub fn cast<U: Scalar>(&self) -> MultitaskNet<U> {
        MultitaskNet {
            arch: self.arch.clone(),
            layout: self.layout.clone(),
            params: self.params.cast(),
            bn: self.bn.iter().map(BnState::cast).collect(),
        }
    }
}

fn validate_tasks(tasks: &[TaskSpec], share_first_conv: bool) -> Result<()> {
    if tasks.is_empty() {
        return Err(Error::Config("at least one task is required".into()));
    }
    for (i, t) in tasks.iter().enumerate() {
        if t.num_classes < 2 {
            return Err(Error::Config(format!(
                "task `{}` needs at least two classes, got {}",
                t.id, t.num_classes
            )));
        }
        if t.input_channels == 0 {
            return Err(Error::Config(format!("task `{}` has no input channels", t.id)));
        }
        if tasks[..i].iter().any(|o| o.id == t.id) {
            return Err(Error::Config(format!("duplicate task id `{}`", t.id)));
        }
    }
    if share_first_conv && tasks.iter().any(|t| t.input_channels != tasks[0].input_channels) {
        let listing: Vec<String> = tasks
            .iter()
            .map(|t| format!("{}={}", t.id, t.input_channels))
            .collect();
        return Err(Error::Config(format!(
            "a shared first convolution needs equal input channels, got {}",
            listing.join(", ")
        )));
    }
    Ok(())
}

/// Loss of one task on a fixed batch, as a [`Differentiable`] for gradient
/// checking. Batch norm runs in train mode.
pub struct NetworkObjective {
    pub net: MultitaskNet<f64>,
    pub batch: Tensor<f64>,
    pub labels: Vec<usize>,
    pub task_id: String,
}

impl Differentiable for NetworkObjective {
    fn params(&self) -> &ParamStore<f64> {
        self.net.params()
    }

    fn params_mut(&mut self) -> &mut ParamStore<f64> {
        self.net.params_mut()
    }

    fn loss(&mut self, tape: &mut Tape<f64>) -> Result<Var> {
        self.net
            .loss(tape, &self.batch, &self.labels, &self.task_id, Mode::Train)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn patches(b: usize, p: usize, c: usize, seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = Normal::new(0.0, 1.0).unwrap();
        let data: Vec<f64> = (0..b * p * p * c).map(|_| n.sample(&mut rng)).collect();
        Tensor::from_f64(&[b, p, p, c], &data).unwrap()
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            patch_size: 5,
            stem_channels: 6,
            num_residual_blocks: 1,
            feature_dim: 10,
        }
    }

    #[test]
    fn two_pavia_tasks_share_one_stem() {
        let tasks = [TaskSpec::new("pu", 9, 103), TaskSpec::new("pc", 9, 103)];
        let net = build_network(&tasks, &ArchConfig::default(), true, 0).unwrap();
        assert_eq!(net.num_stems(), 1);
        assert_eq!(net.num_heads(), 2);
        for t in ["pu", "pc"] {
            let head = net.head(t).unwrap();
            assert_eq!(net.params().get(head.weight).shape(), &[128, 9]);
            assert_eq!(net.head_param_count(t).unwrap(), 129 * 9);
        }
        assert_eq!(net.extractor_param_ids("pu").unwrap(), net.extractor_param_ids("pc").unwrap());
    }

    #[test]
    fn single_task_is_the_degenerate_case() {
        let net = build_network(&[TaskSpec::new("in", 16, 200)], &ArchConfig::default(), true, 0).unwrap();
        assert_eq!((net.num_stems(), net.num_heads()), (1, 1));
        let separate = build_network(&[TaskSpec::new("in", 16, 200)], &ArchConfig::default(), false, 0).unwrap();
        assert_eq!(separate.params().num_scalars(), net.params().num_scalars());
    }

    #[test]
    fn sharing_with_unequal_channels_is_rejected() {
        let tasks = [TaskSpec::new("a", 9, 103), TaskSpec::new("b", 16, 160)];
        let err = build_network(&tasks, &ArchConfig::default(), true, 0).unwrap_err().to_string();
        assert!(err.contains("a=103") && err.contains("b=160"), "{err}");
        let net = build_network(&tasks, &ArchConfig::default(), false, 0).unwrap();
        assert_eq!(net.num_stems(), 2);
    }

    #[test]
    fn feature_shape_for_a_full_batch() {
        let mut net = build_network(&[TaskSpec::new("pu", 9, 103)], &ArchConfig::default(), true, 1).unwrap();
        let mut tape = Tape::new();
        let f = net
            .forward_features(&mut tape, &patches(20, 9, 103, 0), "pu", Mode::Train)
            .unwrap();
        assert_eq!(tape.value(f).shape(), &[20, 128]);
    }

    #[test]
    fn shared_stem_tasks_give_identical_features() {
        let tasks = [TaskSpec::new("a", 3, 4), TaskSpec::new("b", 5, 4)];
        let mut net = MultitaskNet::<f32>::build(&tasks, &small_arch(), true, 2).unwrap();
        let x = patches(4, 5, 4, 1);
        let mut tape = Tape::new();
        net.forward_features(&mut tape, &x, "a", Mode::Train).unwrap();
        let fa = net.infer_features(&x, "a").unwrap();
        let fb = net.infer_features(&x, "b").unwrap();
        assert_eq!(fa, fb);
    }

    #[test]
    fn zero_input_gives_finite_features() {
        let mut net = MultitaskNet::<f32>::build(&[TaskSpec::new("a", 3, 4)], &small_arch(), true, 2).unwrap();
        let mut tape = Tape::new();
        let f = net
            .forward_features(&mut tape, &Tensor::zeros(&[3, 5, 5, 4]), "a", Mode::Train)
            .unwrap();
        assert!(tape.value(f).is_finite());
        assert!(net.infer_features(&Tensor::zeros(&[3, 5, 5, 4]), "a").unwrap().is_finite());
    }

    #[test]
    fn unknown_task_and_channel_errors() {
        let mut net = MultitaskNet::<f32>::build(&[TaskSpec::new("a", 3, 4)], &small_arch(), true, 2).unwrap();
        let mut tape = Tape::new();
        assert!(matches!(
            net.forward_features(&mut tape, &patches(2, 5, 4, 0), "zz", Mode::Train),
            Err(Error::UnknownTask(_))
        ));
        assert!(net
            .forward_features(&mut tape, &patches(2, 5, 3, 0), "a", Mode::Train)
            .is_err());
    }

    #[test]
    fn indian_pines_head_and_uniform_probabilities() {
        let arch = ArchConfig {
            feature_dim: 128,
            ..small_arch()
        };
        let net = MultitaskNet::<f64>::build(&[TaskSpec::new("in", 16, 4)], &arch, true, 0).unwrap();
        let mut tape = Tape::new();
        let f = tape.input(Tensor::zeros(&[3, 128]));
        let logits = net.forward_logits(&mut tape, f, "in").unwrap();
        assert_eq!(tape.value(logits).shape(), &[3, 16]);
        let p = ops::softmax(tape.value(logits)).unwrap();
        assert!(p.data().iter().all(|&v| (v - 1.0 / 16.0).abs() < 1e-12));
    }

    fn zeroed_block_net() -> (MultitaskNet<f64>, ResidualBlock) {
        let arch = ArchConfig {
            stem_channels: 4,
            ..small_arch()
        };
        let mut net = MultitaskNet::<f64>::build(&[TaskSpec::new("a", 2, 4)], &arch, true, 0).unwrap();
        let block = net.layout.trunk.blocks[0];
        for layer in [block.first, block.second] {
            let k = net.params.get_mut(layer.kernel);
            k.data_mut().iter_mut().for_each(|v| *v = 0.0);
            net.bn[layer.bn] = BnState {
                mean: vec![0.0; 4],
                var: vec![1.0; 4],
                updates: 1,
            };
        }
        (net, block)
    }

    #[test]
    fn zero_weight_block_passes_input_through_skip() {
        let (mut net, block) = zeroed_block_net();
        let x = patches(2, 3, 4, 5).cast::<f64>();
        let xid = net.params.add("x", x.clone());
        let mut tape = Tape::new();
        let xv = tape.param(&net.params, xid);
        let mut bank = BnBank::Infer(&net.bn);
        let y = block.forward(&mut tape, &net.params, &mut bank, xv).unwrap();
        assert_eq!(tape.value(y), &ops::relu(&x));
        let loss = tape.sum(y);
        let g = tape.backward(loss, &net.params).unwrap();
        assert!(g.get(xid).unwrap().data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn block_preserves_shape() {
        let arch = ArchConfig {
            stem_channels: 64,
            ..small_arch()
        };
        let mut net = MultitaskNet::<f32>::build(&[TaskSpec::new("a", 2, 3)], &arch, true, 0).unwrap();
        let block = net.layout.trunk.blocks[0];
        let mut tape = Tape::new();
        let x = tape.input(patches(20, 9, 64, 1));
        let mut bank = BnBank::Train(&mut net.bn);
        let y = block.forward(&mut tape, &net.params, &mut bank, x).unwrap();
        assert_eq!(tape.value(y).shape(), &[20, 9, 9, 64]);
    }

    #[test]
    fn features_are_batch_permutation_equivariant() {
        let mut net = MultitaskNet::<f64>::build(&[TaskSpec::new("a", 3, 4)], &small_arch(), true, 4).unwrap();
        let x = patches(3, 5, 4, 9).cast::<f64>();
        net.forward_features(&mut Tape::new(), &x, "a", Mode::Train).unwrap();
        let f = net.infer_features(&x, "a").unwrap();
        let per = 5 * 5 * 4;
        let order = [2usize, 0, 1];
        let permuted: Vec<f64> = order
            .iter()
            .flat_map(|&i| x.data()[i * per..(i + 1) * per].to_vec())
            .collect();
        let fp = net
            .infer_features(&Tensor::new(x.shape(), permuted).unwrap(), "a")
            .unwrap();
        for (row, &i) in order.iter().enumerate() {
            assert_eq!(&fp.data()[row * 10..(row + 1) * 10], &f.data()[i * 10..(i + 1) * 10]);
        }
    }

    #[test]
    fn from_parts_rejects_foreign_parameters() {
        let a = MultitaskNet::<f32>::build(&[TaskSpec::new("a", 3, 4)], &small_arch(), true, 0).unwrap();
        let b = MultitaskNet::<f32>::build(&[TaskSpec::new("a", 5, 4)], &small_arch(), true, 0).unwrap();
        assert!(MultitaskNet::from_parts(
            &small_arch(),
            &[TaskSpec::new("a", 3, 4)],
            true,
            b.params().clone(),
            b.bn_states().to_vec()
        )
        .is_err());
        let back = MultitaskNet::from_parts(
            &small_arch(),
            &[TaskSpec::new("a", 3, 4)],
            true,
            a.params().clone(),
            a.bn_states().to_vec(),
        )
        .unwrap();
        assert_eq!(back, a);
    }
}
