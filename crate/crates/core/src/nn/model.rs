use std::fmt;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layers::{
    AvgPool2d, Concat, Conv2d, Dense, GlobalAvgPool, Identity, Layer, MaxPool2d, Param, ParamVisitor,
    Relu, Residual, Sequential,
};
use super::loss::LossSpec;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Image channels expected by every sub-model.
pub const INPUT_CHANNELS: usize = 3;

/// Anything with named trainable parameters in a fixed visiting order.
pub trait HasParams {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>);

    fn param_count(&mut self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |_, p| n += p.value.len());
        n
    }

    fn zero_grads(&mut self) {
        self.visit_params(&mut |_, p| p.zero_grad());
    }

    /// Copies of all parameter values, in visiting order.
    fn snapshot(&mut self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.visit_params(&mut |name, p| out.push((name.to_string(), p.value.clone())));
        out
    }

    /// Restores values taken by [`HasParams::snapshot`] (or read from a
    /// checkpoint), checking names and shapes.
    fn restore(&mut self, values: &[(String, Tensor)]) -> Result<()> {
        let mut i = 0;
        let mut err = None;
        self.visit_params(&mut |name, p| {
            if err.is_some() {
                return;
            }
            match values.get(i) {
                Some((n, t)) if n == name && t.shape() == p.value.shape() => p.value = t.clone(),
                Some((n, t)) => {
                    err = Some(Error::Checkpoint(format!(
                        "parameter {i}: expected {name} {:?}, found {n} {:?}",
                        p.value.shape(),
                        t.shape()
                    )))
                }
                None => err = Some(Error::Checkpoint(format!("missing parameter {name}"))),
            }
            i += 1;
        });
        if let Some(e) = err {
            return Err(e);
        }
        if i != values.len() {
            return Err(Error::Checkpoint(format!(
                "{} parameters supplied, model has {i}",
                values.len()
            )));
        }
        Ok(())
    }

    /// SHA-256 over parameter names, shapes and exact values.
    fn param_hash(&mut self) -> String {
        let mut h = Sha256::new();
        self.visit_params(&mut |name, p| {
            h.update(name.as_bytes());
            for &d in p.value.shape() {
                h.update((d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_bits().to_le_bytes());
            }
        });
        format!("{:x}", h.finalize())
    }

    /// Fails on the first parameter whose gradient holds NaN or infinity.
    fn check_grads(&mut self) -> Result<()> {
        let mut bad = None;
        self.visit_params(&mut |name, p| {
            if bad.is_none() && !p.grad.is_finite() {
                bad = Some(name.to_string());
            }
        });
        match bad {
            Some(layer) => Err(Error::NonFiniteGradient { layer }),
            None => Ok(()),
        }
    }

    /// Rounds every parameter to `f32`, the checkpoint precision, so a model
    /// in memory predicts exactly like one loaded from disk.
    fn round_to_f32(&mut self) {
        self.visit_params(&mut |_, p| {
            for v in p.value.data_mut() {
                *v = *v as f32 as f64;
            }
        });
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Architecture {
    /// Strided stem, pooling and an identity-skip residual block.
    #[serde(rename = "convnet-A")]
    ConvnetA,
    /// Parallel 1×1 / 3×3 / 5×5 branches concatenated along channels.
    #[serde(rename = "convnet-B")]
    ConvnetB,
    /// Densely connected block where each unit sees all earlier outputs.
    #[serde(rename = "convnet-C")]
    ConvnetC,
}

impl Architecture {
    pub const ALL: [Architecture; 3] = [Self::ConvnetA, Self::ConvnetB, Self::ConvnetC];

    pub fn id(self) -> &'static str {
        match self {
            Self::ConvnetA => "convnet-A",
            Self::ConvnetB => "convnet-B",
            Self::ConvnetC => "convnet-C",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubModelSpec {
    pub architecture: Architecture,
    pub loss: LossSpec,
    pub feature_dim: usize,
    pub rng_seed: u64,
}

impl SubModelSpec {
    pub fn new(architecture: Architecture, loss: LossSpec, rng_seed: u64) -> Self {
        Self {
            architecture,
            loss,
            feature_dim: 32,
            rng_seed,
        }
    }

    pub fn label(&self) -> String {
        match self.loss.kind {
            super::LossKind::CrossEntropy => format!("{}-ce", self.architecture),
            super::LossKind::Focal { gamma } => format!("{}-focal{gamma}", self.architecture),
        }
    }
}

/// Width of the last convolutional feature map, shared by all architectures.
pub const TRUNK_CHANNELS: usize = 32;

fn boxed(l: impl Layer + 'static) -> Box<dyn Layer> {
    Box::new(l)
}

fn conv_relu(cin: usize, cout: usize, k: usize, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![boxed(Conv2d::same(cin, cout, k, rng)), boxed(Relu::new())])
}

fn trunk(arch: Architecture, rng: &mut ChaCha8Rng) -> Sequential {
    let mut s = Sequential::default();
    match arch {
        Architecture::ConvnetA => {
            s.push(Conv2d::new(INPUT_CHANNELS, 16, 3, 2, 1, rng));
            s.push(Relu::new());
            s.push(MaxPool2d::new(2, 2));
            s.push(Residual::new(Sequential::new(vec![
                boxed(Conv2d::same(16, 16, 3, rng)),
                boxed(Relu::new()),
                boxed(Conv2d::same(16, 16, 3, rng)),
            ])));
            s.push(Relu::new());
            s.push(MaxPool2d::new(2, 2));
        }
        Architecture::ConvnetB => {
            s.push(Conv2d::new(INPUT_CHANNELS, 12, 3, 2, 1, rng));
            s.push(Relu::new());
            s.push(MaxPool2d::new(2, 2));
            s.push(Concat::new(vec![
                boxed(Conv2d::same(12, 8, 1, rng)),
                boxed(Sequential::new(vec![
                    boxed(conv_relu(12, 8, 1, rng)),
                    boxed(Conv2d::same(8, 8, 3, rng)),
                ])),
                boxed(Sequential::new(vec![
                    boxed(conv_relu(12, 4, 1, rng)),
                    boxed(Conv2d::same(4, 8, 5, rng)),
                ])),
            ]));
            s.push(Relu::new());
            s.push(MaxPool2d::new(2, 2));
        }
        Architecture::ConvnetC => {
            const GROWTH: usize = 8;
            s.push(Conv2d::new(INPUT_CHANNELS, 12, 3, 2, 1, rng));
            s.push(Relu::new());
            s.push(MaxPool2d::new(2, 2));
            let mut c = 12;
            for _ in 0..3 {
                s.push(Concat::new(vec![boxed(Identity), boxed(conv_relu(c, GROWTH, 3, rng))]));
                c += GROWTH;
            }
            s.push(conv_relu(c, 24, 1, rng));
            s.push(AvgPool2d::new(2));
        }
    }
    let cin = match arch {
        Architecture::ConvnetA => 16,
        Architecture::ConvnetB => 24,
        Architecture::ConvnetC => 24,
    };
    s.push(conv_relu(cin, TRUNK_CHANNELS, 3, rng));
    s
}

/// One convolutional classifier: trunk → global pooling → feature layer
/// (the penultimate activations) → class logits.
pub struct SubModel {
    pub spec: SubModelSpec,
    num_classes: usize,
    input_size: usize,
    trunk: Sequential,
    pool: GlobalAvgPool,
    embed: Dense,
    embed_relu: Relu,
    head: Dense,
}

/// Outputs of one forward pass.
pub struct ForwardPass {
    pub logits: Tensor,
    pub features: Tensor,
    /// Activations of the last convolution, `[n, TRUNK_CHANNELS, h, w]`.
    pub feature_map: Tensor,
}

impl SubModel {
    pub fn new(spec: SubModelSpec, num_classes: usize, input_size: usize) -> Result<Self> {
        if spec.feature_dim == 0 {
            return Err(Error::InvalidConfig("feature_dim must be positive".into()));
        }
        if num_classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {num_classes}")));
        }
        if input_size < 16 {
            return Err(Error::InvalidConfig(format!("input size {input_size} is below 16")));
        }
        spec.loss.validate(num_classes)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
        let trunk = trunk(spec.architecture, &mut rng);
        let embed = Dense::new(TRUNK_CHANNELS, spec.feature_dim, &mut rng);
        let head = Dense::new(spec.feature_dim, num_classes, &mut rng);
        Ok(Self {
            spec,
            num_classes,
            input_size,
            trunk,
            pool: GlobalAvgPool::new(),
            embed,
            embed_relu: Relu::new(),
            head,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> usize {
        self.input_size
    }

    pub fn feature_dim(&self) -> usize {
        self.spec.feature_dim
    }

    pub fn input_shape(&self, batch: usize) -> [usize; 4] {
        [batch, INPUT_CHANNELS, self.input_size, self.input_size]
    }

    /// The class head, exposed so tests can zero it.
    pub fn head_mut(&mut self) -> &mut Dense {
        &mut self.head
    }

    pub fn forward_full(&mut self, x: &Tensor) -> Result<ForwardPass> {
        x.check_shape(&self.input_shape(x.batch()))?;
        let feature_map = self.trunk.forward(x)?;
        let pooled = self.pool.forward(&feature_map)?;
        let features = self.embed_relu.forward(&self.embed.forward(&pooled)?)?;
        let logits = self.head.forward(&features)?;
        Ok(ForwardPass {
            logits,
            features,
            feature_map,
        })
    }

    /// `(logits [n, classes], features [n, feature_dim])`.
    pub fn forward(&mut self, x: &Tensor) -> Result<(Tensor, Tensor)> {
        let f = self.forward_full(x)?;
        Ok((f.logits, f.features))
    }

    /// Backpropagates from the logits of the last forward pass down to the
    /// last convolutional map, accumulating head gradients on the way.
    pub fn backward_to_map(&mut self, dlogits: &Tensor) -> Tensor {
        let g = self.head.backward(dlogits);
        self.backward_features_to_map(&g)
    }

    /// Like [`SubModel::backward_to_map`], starting from a gradient on the
    /// penultimate features.
    pub fn backward_features_to_map(&mut self, dfeatures: &Tensor) -> Tensor {
        let g = self.embed_relu.backward(dfeatures);
        let g = self.embed.backward(&g);
        self.pool.backward(&g)
    }

    /// Full backward pass; fails naming the parameter if any gradient is
    /// not finite.
    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        let g = self.backward_to_map(dlogits);
        self.trunk.backward(&g);
        self.check_grads()
    }
}

impl HasParams for SubModel {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.trunk.visit_params("trunk", f);
        self.embed.visit_params("embed", f);
        self.head.visit_params("head", f);
    }
}

/// Two fully connected layers with a rectifier between them.
pub struct FusionHead {
    pub hidden: Dense,
    relu: Relu,
    pub out: Dense,
}

impl FusionHead {
    pub fn new(inputs: usize, hidden: usize, classes: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            hidden: Dense::new(inputs, hidden, &mut rng),
            relu: Relu::new(),
            out: Dense::new(hidden, classes, &mut rng),
        }
    }

    pub fn inputs(&self) -> usize {
        self.hidden.inputs()
    }

    pub fn forward(&mut self, x: &Tensor) -> Result<Tensor> {
        let h = self.relu.forward(&self.hidden.forward(x)?)?;
        self.out.forward(&h)
    }

    pub fn backward(&mut self, dlogits: &Tensor) -> Result<()> {
        self.backward_input(dlogits);
        self.check_grads()
    }

    /// Backward pass returning the gradient with respect to the fused
    /// features. Parameter gradients accumulate as in [`Self::backward`].
    pub fn backward_input(&mut self, dlogits: &Tensor) -> Tensor {
        let g = self.out.backward(dlogits);
        let g = self.relu.backward(&g);
        self.hidden.backward(&g)
    }
}

impl HasParams for FusionHead {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        self.hidden.visit_params("fusion.hidden", f);
        self.out.visit_params("fusion.out", f);
    }
}

impl HasParams for Param {
    fn visit_params(&mut self, f: &mut ParamVisitor<'_>) {
        f("param", self);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{softmax, LossSpec};

    fn spec(arch: Architecture) -> SubModelSpec {
        SubModelSpec::new(arch, LossSpec::cross_entropy(), 7)
    }

    #[test]
    fn architectures_are_distinct_and_small() {
        let mut counts = Vec::new();
        for arch in Architecture::ALL {
            let mut m = SubModel::new(spec(arch), 4, 64).unwrap();
            let n = m.param_count();
            assert!(n <= 200_000, "{arch}: {n}");
            counts.push(n);
            let (logits, feats) = m.forward(&Tensor::zeros(&[2, 3, 64, 64])).unwrap();
            assert_eq!(logits.shape(), &[2, 4]);
            assert_eq!(feats.shape(), &[2, 32]);
        }
        counts.dedup();
        assert_eq!(counts.len(), 3);
    }

    #[test]
    fn zero_head_gives_uniform_softmax() {
        let mut m = SubModel::new(spec(Architecture::ConvnetB), 4, 32).unwrap();
        let head = m.head_mut();
        head.weight.value.data_mut().fill(0.0);
        head.bias.value.data_mut().fill(0.0);
        let (logits, _) = m.forward(&Tensor::zeros(&[3, 3, 32, 32])).unwrap();
        for i in 0..3 {
            for &p in softmax(&logits).row(i) {
                assert!((p - 0.25).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn wrong_input_shape_is_named() {
        let mut m = SubModel::new(spec(Architecture::ConvnetA), 2, 64).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 3, 32, 32])).err().unwrap();
        match err {
            Error::ShapeMismatch { expected, actual } => {
                assert_eq!(expected, vec![1, 3, 64, 64]);
                assert_eq!(actual, vec![1, 3, 32, 32]);
            }
            e => panic!("{e}"),
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let a = SubModel::new(spec(Architecture::ConvnetC), 2, 32).unwrap().param_hash();
        let b = SubModel::new(spec(Architecture::ConvnetC), 2, 32).unwrap().param_hash();
        assert_eq!(a, b);
    }

    #[test]
    fn nan_gradient_names_the_parameter() {
        let mut m = SubModel::new(spec(Architecture::ConvnetA), 2, 32).unwrap();
        m.forward(&Tensor::zeros(&[1, 3, 32, 32])).unwrap();
        let d = Tensor::from_vec(&[1, 2], vec![f64::NAN, 0.0]).unwrap();
        match m.backward(&d) {
            // A zero image leaves every feature at 0, so the rectifier stops
            // the NaN before it reaches the trunk.
            Err(Error::NonFiniteGradient { layer }) => assert_eq!(layer, "head.weight"),
            other => panic!("{other:?}"),
        }
    }
}
