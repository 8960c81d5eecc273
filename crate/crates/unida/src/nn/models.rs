//! The model components of the adaptation pipeline and their contracts:
//! feature extractor F, classifier C, adversarial and non-adversarial
//! domain discriminators D and D', conditional generator G, the frozen
//! multi-tap style network, and the frozen pre-trained source model M.

use ndarray::{concatenate, Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::checksum::params_checksum;
use super::kernels::{self, ConvSpec};
use super::layers::{
    BatchNorm, Conv2d, ConvTranspose2d, GlobalAvgPool, Layer, LeakyRelu, Sequential, Sigmoid,
    ToImage,
};
use super::ops;
use super::optim::{InvDecay, SgdMomentum};
use super::{NnError, Tensor};
use crate::dataset::{DomainDataset, DomainRole};
use crate::exec::ExecMode;
use crate::rng::{self, Stream};

/// Feature dimension produced by the desk-scale backbone.
pub const FEATURE_DIM: usize = 128;

/// Hidden width of both domain discriminators.
pub const DISC_HIDDEN: usize = 256;

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

/// Forward pass of the gradient-reversal point: identity.
pub fn reverse_gradient(features: &Array2<f64>, _lambda: f64) -> Array2<f64> {
    features.clone()
}

/// Backward pass of the gradient-reversal point: the upstream gradient is
/// scaled by `-lambda`.
pub fn reverse_gradient_backward(upstream: &Array2<f64>, lambda: f64) -> Array2<f64> {
    upstream.mapv(|g| -lambda * g)
}

// ---------------------------------------------------------------------------
// Feature extractor
// ---------------------------------------------------------------------------

/// Four stride-2 conv blocks (32/64/128/128 channels) with leaky ReLU,
/// global average pool to a 128-dim feature vector.
pub struct FeatureExtractor {
    pub net: Sequential,
    pub image_size: usize,
}

impl FeatureExtractor {
    pub fn new(image_size: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = ConvSpec { kernel: 3, stride: 2, pad: 1 };
        let widths = [3usize, 32, 64, 128, FEATURE_DIM];
        let mut layers: Vec<Box<dyn Layer>> = Vec::new();
        for i in 0..4 {
            layers.push(Box::new(Conv2d::new(widths[i], widths[i + 1], spec, rng)));
            layers.push(Box::new(LeakyRelu::new(0.1)));
        }
        layers.push(Box::new(GlobalAvgPool::new()));
        FeatureExtractor { net: Sequential::new(layers), image_size }
    }

    pub fn check_resolution(&self, x: &Array4<f64>) -> Result<(), NnError> {
        let (_, _, h, w) = x.dim();
        if h != self.image_size || w != self.image_size {
            return Err(NnError::ResolutionMismatch { want: self.image_size, got: h.max(w) });
        }
        Ok(())
    }

    pub fn forward_train(&mut self, x: &Array4<f64>, mode: ExecMode) -> Array2<f64> {
        self.net.forward(&Tensor::D4(x.clone()), mode).into_d2()
    }

    /// Inference-mode features (no caching; shareable).
    pub fn features(&self, x: &Array4<f64>, mode: ExecMode) -> Array2<f64> {
        self.net.infer(&Tensor::D4(x.clone()), mode).into_d2()
    }

    pub fn backward(&mut self, grad: &Array2<f64>, mode: ExecMode) -> Array4<f64> {
        self.net.backward(&Tensor::D2(grad.clone()), mode).into_d4()
    }
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

/// Single linear layer over the feature vector; softmax gives ȳ.
pub struct Classifier {
    pub net: Sequential,
    pub num_classes: usize,
}

impl Classifier {
    pub fn new(num_classes: usize, rng: &mut ChaCha8Rng) -> Self {
        let linear = super::layers::Linear::new(FEATURE_DIM, num_classes, rng);
        Classifier { net: Sequential::new(vec![Box::new(linear)]), num_classes }
    }

    pub fn logits_train(&mut self, features: &Array2<f64>, mode: ExecMode) -> Array2<f64> {
        self.net.forward(&Tensor::D2(features.clone()), mode).into_d2()
    }

    pub fn logits(&self, features: &Array2<f64>, mode: ExecMode) -> Array2<f64> {
        self.net.infer(&Tensor::D2(features.clone()), mode).into_d2()
    }

    pub fn proba(&self, features: &Array2<f64>, mode: ExecMode) -> Array2<f64> {
        ops::softmax_rows(&self.logits(features, mode))
    }

    pub fn backward(&mut self, grad_logits: &Array2<f64>, mode: ExecMode) -> Array2<f64> {
        self.net.backward(&Tensor::D2(grad_logits.clone()), mode).into_d2()
    }
}

/// Class-probability rows for an image batch through F then C.
/// Errors if the batch resolution does not match the extractor's.
pub fn classify(
    classifier: &Classifier,
    feature: &FeatureExtractor,
    x: &Array4<f64>,
    mode: ExecMode,
) -> Result<Array2<f64>, NnError> {
    feature.check_resolution(x)?;
    Ok(classifier.proba(&feature.features(x, mode), mode))
}

// ---------------------------------------------------------------------------
// Domain discriminators
// ---------------------------------------------------------------------------

/// Three-layer MLP emitting one logit; sigma of the logit is the domain
/// probability. The same type serves as the adversarial discriminator D
/// (reached through gradient reversal) and the non-adversarial D'
/// (trained on detached features).
pub struct DomainDiscriminator {
    pub net: Sequential,
}

impl DomainDiscriminator {
    pub fn new(rng: &mut ChaCha8Rng) -> Self {
        let l1 = super::layers::Linear::new(FEATURE_DIM, DISC_HIDDEN, rng);
        let l2 = super::layers::Linear::new(DISC_HIDDEN, DISC_HIDDEN, rng);
        let l3 = super::layers::Linear::new(DISC_HIDDEN, 1, rng);
        DomainDiscriminator {
            net: Sequential::new(vec![
                Box::new(l1),
                Box::new(LeakyRelu::new(0.0)),
                Box::new(l2),
                Box::new(LeakyRelu::new(0.0)),
                Box::new(l3),
            ]),
        }
    }

    pub fn logit_train(&mut self, features: &Array2<f64>, mode: ExecMode) -> Array1<f64> {
        let out = self.net.forward(&Tensor::D2(features.clone()), mode).into_d2();
        out.index_axis(Axis(1), 0).to_owned()
    }

    pub fn logit(&self, features: &Array2<f64>, mode: ExecMode) -> Array1<f64> {
        let out = self.net.infer(&Tensor::D2(features.clone()), mode).into_d2();
        out.index_axis(Axis(1), 0).to_owned()
    }

    /// Probability that each feature row came from the source domain —
    /// strictly inside (0, 1).
    pub fn domain_probability(&self, features: &Array2<f64>, mode: ExecMode) -> Array1<f64> {
        self.logit(features, mode).mapv(ops::sigmoid)
    }

    pub fn backward(&mut self, grad_logit: &Array1<f64>, mode: ExecMode) -> Array2<f64> {
        let g = grad_logit
            .clone()
            .into_shape_with_order((grad_logit.len(), 1))
            .expect("column vector");
        self.net.backward(&Tensor::D2(g), mode).into_d2()
    }
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

/// Conditional generator: (one-hot class ‖ noise) through two FC layers,
/// then transposed-conv upsampling to the target resolution, batch-norm on
/// every layer, sigmoid squashing to [0, 1].
pub struct Generator {
    pub net: Sequential,
    pub num_classes: usize,
    pub z_dim: usize,
    pub image_size: usize,
}

impl Generator {
    pub fn new(
        num_classes: usize,
        z_dim: usize,
        image_size: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self, NnError> {
        if image_size % 8 != 0 || image_size == 0 {
            return Err(NnError::BadImageSize(image_size));
        }
        let base = image_size / 8;
        let up = ConvSpec { kernel: 4, stride: 2, pad: 1 };
        let head = ConvSpec { kernel: 3, stride: 1, pad: 1 };
        let layers: Vec<Box<dyn Layer>> = vec![
            Box::new(super::layers::Linear::new(num_classes + z_dim, 256, rng)),
            Box::new(BatchNorm::new(256)),
            Box::new(LeakyRelu::new(0.0)),
            Box::new(super::layers::Linear::new(256, 128 * base * base, rng)),
            Box::new(BatchNorm::new(128 * base * base)),
            Box::new(LeakyRelu::new(0.0)),
            Box::new(ToImage { channels: 128, height: base, width: base }),
            Box::new(ConvTranspose2d::new(128, 64, up, rng)),
            Box::new(BatchNorm::new(64)),
            Box::new(LeakyRelu::new(0.0)),
            Box::new(ConvTranspose2d::new(64, 32, up, rng)),
            Box::new(BatchNorm::new(32)),
            Box::new(LeakyRelu::new(0.0)),
            Box::new(ConvTranspose2d::new(32, 16, up, rng)),
            Box::new(BatchNorm::new(16)),
            Box::new(LeakyRelu::new(0.0)),
            Box::new(Conv2d::new(16, 3, head, rng)),
            Box::new(Sigmoid::new()),
        ];
        Ok(Generator { net: Sequential::new(layers), num_classes, z_dim, image_size })
    }

    /// Concatenate one-hot labels and noise into generator input rows.
    pub fn latent_input(&self, y: &Array2<f64>, z: &Array2<f64>) -> Array2<f64> {
        assert_eq!(y.ncols(), self.num_classes);
        assert_eq!(z.ncols(), self.z_dim);
        concatenate![Axis(1), y.view(), z.view()]
    }

    pub fn generate_train(&mut self, input: &Array2<f64>, mode: ExecMode) -> Array4<f64> {
        self.net.forward(&Tensor::D2(input.clone()), mode).into_d4()
    }

    /// Inference-mode generation (batch-norm running statistics).
    pub fn generate(&self, input: &Array2<f64>, mode: ExecMode) -> Array4<f64> {
        self.net.infer(&Tensor::D2(input.clone()), mode).into_d4()
    }

    pub fn backward(&mut self, grad: &Array4<f64>, mode: ExecMode) -> Array2<f64> {
        self.net.backward(&Tensor::D4(grad.clone()), mode).into_d2()
    }
}

// ---------------------------------------------------------------------------
// Style network
// ---------------------------------------------------------------------------

/// Frozen four-stage conv pyramid with fixed random weights (pinned seed).
/// Exposes post-ReLU activations at each stage; spatial size halves after
/// the first stage, so a 32x32 input yields taps at 32, 16, 8 and 4.
pub struct StyleNetwork {
    weights: Vec<Array4<f64>>,
    specs: Vec<ConvSpec>,
}

/// Per-stage data needed to backpropagate a style gradient to the input.
pub struct StyleCache {
    inputs: Vec<Array4<f64>>,
    taps: Vec<Array4<f64>>,
}

impl StyleCache {
    /// The tap activations captured by the forward pass.
    pub fn taps(&self) -> &[Array4<f64>] {
        &self.taps
    }
}

impl StyleNetwork {
    pub const TAPS: usize = 4;

    /// The default desk-scale instance with the pinned seed.
    pub fn fixed() -> Self {
        Self::with_seed(rng::STYLE_NETWORK_SEED)
    }

    pub fn with_seed(seed: u64) -> Self {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let channels = [3usize, 8, 16, 32, 64];
        let strides = [1usize, 2, 2, 2];
        let mut weights = Vec::new();
        let mut specs = Vec::new();
        for i in 0..Self::TAPS {
            let spec = ConvSpec { kernel: 3, stride: strides[i], pad: 1 };
            let fan_in = channels[i] * spec.kernel * spec.kernel;
            let std = (2.0 / fan_in as f64).sqrt();
            let w = Array4::from_shape_fn(
                (channels[i + 1], channels[i], spec.kernel, spec.kernel),
                |_| {
                    let u1: f64 = r.gen_range(f64::EPSILON..1.0);
                    let u2: f64 = r.gen_range(0.0..1.0);
                    std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                },
            );
            weights.push(w);
            specs.push(spec);
        }
        StyleNetwork { weights, specs }
    }

    /// Activations at the four taps (post-ReLU).
    pub fn activations(&self, x: &Array4<f64>, mode: ExecMode) -> Vec<Array4<f64>> {
        self.forward_with_cache(x, mode).taps
    }

    /// Activations plus the cached inputs needed for a backward pass.
    pub fn forward_with_cache(&self, x: &Array4<f64>, mode: ExecMode) -> StyleCache {
        let mut inputs = Vec::with_capacity(Self::TAPS);
        let mut taps = Vec::with_capacity(Self::TAPS);
        let mut cur = x.clone();
        for (w, spec) in self.weights.iter().zip(&self.specs) {
            inputs.push(cur.clone());
            let (pre, _) = kernels::conv2d_forward(mode, &cur.view(), &w.view(), None, *spec);
            let act = pre.mapv(|v| v.max(0.0));
            taps.push(act.clone());
            cur = act;
        }
        StyleCache { inputs, taps }
    }

    /// Push per-tap gradients back to the network input. The network's own
    /// weights are frozen so only the input gradient is formed.
    pub fn backward_to_input(
        &self,
        cache: &StyleCache,
        tap_grads: &[Array4<f64>],
        mode: ExecMode,
    ) -> Array4<f64> {
        assert_eq!(tap_grads.len(), Self::TAPS);
        let mut flowing: Option<Array4<f64>> = None;
        for j in (0..Self::TAPS).rev() {
            let mut g_post = tap_grads[j].clone();
            if let Some(down) = flowing.take() {
                g_post += &down;
            }
            // ReLU mask: the tap itself tells where the pre-activation was positive.
            let g_pre = &g_post * &cache.taps[j].mapv(|v| if v > 0.0 { 1.0 } else { 0.0 });
            let in_shape = cache.inputs[j].dim();
            flowing = Some(kernels::conv2d_input_grad(
                mode,
                &self.weights[j].view(),
                &g_pre.view(),
                in_shape,
                self.specs[j],
            ));
        }
        flowing.expect("at least one tap")
    }

    /// Checksum over the frozen weights.
    pub fn checksum(&self) -> [u8; 32] {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        for w in &self.weights {
            for &v in w.iter() {
                hasher.update(v.to_le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

/// The style taps for an image batch (J = 4 feature maps).
pub fn style_activations(
    style: &StyleNetwork,
    x: &Array4<f64>,
    mode: ExecMode,
) -> Vec<Array4<f64>> {
    style.activations(x, mode)
}

// ---------------------------------------------------------------------------
// Pre-trained model
// ---------------------------------------------------------------------------

/// The frozen source model M: a feature extractor and classifier trained
/// on (real) source data. Freezing is a protocol contract — verify with
/// [`PretrainedModel::checksum`].
pub struct PretrainedModel {
    pub feature: FeatureExtractor,
    pub classifier: Classifier,
    pub train_accuracy: f64,
}

impl PretrainedModel {
    pub fn num_classes(&self) -> usize {
        self.classifier.num_classes
    }

    /// ȳ = softmax(C(F(x))) in inference mode.
    pub fn predict_proba(&self, x: &Array4<f64>, mode: ExecMode) -> Array2<f64> {
        self.classifier.proba(&self.feature.features(x, mode), mode)
    }

    pub fn checksum(&self) -> [u8; 32] {
        super::checksum::combine(&[
            params_checksum(&self.feature.net),
            params_checksum(&self.classifier.net),
        ])
    }

    /// Forward in training mode (caches activations) and return logits.
    /// Parameters are still frozen by contract; this only fills caches so
    /// a gradient can flow *through* M to its input.
    pub fn logits_capturing(&mut self, x: &Array4<f64>, mode: ExecMode) -> Array2<f64> {
        let feats = self.feature.forward_train(x, mode);
        self.classifier.logits_train(&feats, mode)
    }

    /// Gradient of a scalar loss with respect to M's input, given the
    /// gradient at the logits from the last `logits_capturing` call.
    /// Parameter gradients accumulated along the way are discarded.
    pub fn input_gradient(&mut self, grad_logits: &Array2<f64>, mode: ExecMode) -> Array4<f64> {
        let g_feat = self.classifier.backward(grad_logits, mode);
        let g_input = self.feature.backward(&g_feat, mode);
        self.classifier.net.zero_grad();
        self.feature.net.zero_grad();
        g_input
    }
}

/// Train a source model from scratch on a labeled real-source dataset with
/// cross-entropy and momentum SGD, then freeze it.
pub fn pretrain_source_model(
    source: &DomainDataset,
    iterations: usize,
    batch_size: usize,
    lr: f64,
    seed: u64,
    mode: ExecMode,
) -> Result<PretrainedModel, NnError> {
    assert!(
        source.role() == DomainRole::RealSource,
        "pretraining requires a real-source dataset"
    );
    let num_classes = source.label_set().len();
    if num_classes < 2 {
        return Err(NnError::TooFewClasses(num_classes));
    }
    let (_, h, _) = source.image_shape();
    let mut feature = FeatureExtractor::new(h, &mut rng::stream(seed, Stream::InitFeature));
    let mut classifier = Classifier::new(num_classes, &mut rng::stream(seed, Stream::InitClassifier));
    let mut sampler = rng::stream(seed, Stream::Pretrain);
    let mut opt_f = SgdMomentum::new(lr, 0.9, true, Some(InvDecay::default()));
    let mut opt_c = SgdMomentum::new(lr, 0.9, true, Some(InvDecay::default()));

    let n = source.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n; // force an initial shuffle
    for step in 0..iterations {
        let mut batch_idx = Vec::with_capacity(batch_size);
        while batch_idx.len() < batch_size {
            if cursor >= n {
                order.shuffle(&mut sampler);
                cursor = 0;
            }
            batch_idx.push(order[cursor]);
            cursor += 1;
        }
        let x = source.batch(&batch_idx);
        let labels = source.batch_train_labels(&batch_idx);
        let targets = ops::one_hot(&labels, num_classes);

        let feats = feature.forward_train(&x, mode);
        let logits = classifier.logits_train(&feats, mode);
        let probs = ops::softmax_rows(&logits);
        let grad_logits = ops::softmax_ce_grad(&probs, &targets);
        let g_feat = classifier.backward(&grad_logits, mode);
        feature.backward(&g_feat, mode);

        let progress = step as f64 / iterations.max(1) as f64;
        opt_f.step(&mut feature.net, progress);
        opt_c.step(&mut classifier.net, progress);
    }

    // Report accuracy over the full training set.
    let mut correct = 0usize;
    let chunk = batch_size.max(1);
    for start in (0..n).step_by(chunk) {
        let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
        let x = source.batch(&idx);
        let probs = classifier.proba(&feature.features(&x, mode), mode);
        let preds = ops::argmax_rows(&probs);
        for (row, &i) in idx.iter().enumerate() {
            if Some(preds[row]) == source.train_label(i) {
                correct += 1;
            }
        }
    }
    let train_accuracy = correct as f64 / n.max(1) as f64;

    Ok(PretrainedModel { feature, classifier, train_accuracy })
}

// ---------------------------------------------------------------------------
// Model bundle
// ---------------------------------------------------------------------------

/// Everything the adaptation stage trains or consults: the five trainable
/// components plus the frozen pre-trained model and style network.
pub struct ModelBundle {
    pub feature: FeatureExtractor,
    pub classifier: Classifier,
    pub disc_adv: DomainDiscriminator,
    pub disc_sim: DomainDiscriminator,
    pub generator: Generator,
    pub pretrained: PretrainedModel,
    pub style: StyleNetwork,
}

impl ModelBundle {
    /// F and C start from the pre-trained model; D, D' and G are fresh.
    pub fn from_pretrained(
        pretrained: PretrainedModel,
        z_dim: usize,
        seed: u64,
    ) -> Result<Self, NnError> {
        let image_size = pretrained.feature.image_size;
        let num_classes = pretrained.num_classes();
        let feature = clone_feature(&pretrained.feature);
        let classifier = clone_classifier(&pretrained.classifier);
        let disc_adv = DomainDiscriminator::new(&mut rng::stream(seed, Stream::InitDiscAdv));
        let disc_sim = DomainDiscriminator::new(&mut rng::stream(seed, Stream::InitDiscSim));
        let generator = Generator::new(
            num_classes,
            z_dim,
            image_size,
            &mut rng::stream(seed, Stream::InitGenerator),
        )?;
        Ok(ModelBundle {
            feature,
            classifier,
            disc_adv,
            disc_sim,
            generator,
            pretrained,
            style: StyleNetwork::fixed(),
        })
    }
}

/// Deep-copy a feature extractor via its parameters.
pub fn clone_feature(src: &FeatureExtractor) -> FeatureExtractor {
    let mut dst = FeatureExtractor::new(src.image_size, &mut ChaCha8Rng::seed_from_u64(0));
    copy_params(&src.net, &mut dst.net);
    dst
}

/// Deep-copy a classifier via its parameters.
pub fn clone_classifier(src: &Classifier) -> Classifier {
    let mut dst = Classifier::new(src.num_classes, &mut ChaCha8Rng::seed_from_u64(0));
    copy_params(&src.net, &mut dst.net);
    dst
}

/// Deep-copy a generator via its parameters (architecture recreated).
pub fn clone_generator(src: &Generator) -> Generator {
    let mut dst = Generator::new(
        src.num_classes,
        src.z_dim,
        src.image_size,
        &mut ChaCha8Rng::seed_from_u64(0),
    )
    .expect("source generator already validated the size");
    copy_params(&src.net, &mut dst.net);
    copy_batchnorm_stats(&src.net, &mut dst.net);
    dst
}

/// Deep-copy a discriminator via its parameters.
pub fn clone_discriminator(src: &DomainDiscriminator) -> DomainDiscriminator {
    let mut dst = DomainDiscriminator::new(&mut ChaCha8Rng::seed_from_u64(0));
    copy_params(&src.net, &mut dst.net);
    dst
}

pub(crate) fn copy_params(src: &Sequential, dst: &mut Sequential) {
    let mut values = Vec::new();
    src.visit_params_ref(&mut |p| values.push(p.value.clone()));
    let mut i = 0;
    dst.visit_params(&mut |p| {
        p.value = values[i].clone();
        p.grad.fill(0.0);
        i += 1;
    });
    assert_eq!(i, values.len(), "parameter count mismatch in copy");
}

/// Copy batch-norm running statistics between structurally identical nets.
pub(crate) fn copy_batchnorm_stats(src: &Sequential, dst: &mut Sequential) {
    let src_stats = collect_bn_stats(src);
    apply_bn_stats(dst, &src_stats);
}

pub(crate) fn collect_bn_stats(net: &Sequential) -> Vec<(Array1<f64>, Array1<f64>)> {
    let mut out = Vec::new();
    for layer in &net.layers {
        if let Some(bn) = layer.as_bn() {
            out.push((bn.running_mean.clone(), bn.running_var.clone()));
        }
    }
    out
}

pub(crate) fn apply_bn_stats(net: &mut Sequential, stats: &[(Array1<f64>, Array1<f64>)]) {
    let mut i = 0;
    for layer in &mut net.layers {
        if let Some(bn) = layer.as_bn_mut() {
            bn.running_mean = stats[i].0.clone();
            bn.running_var = stats[i].1.clone();
            i += 1;
        }
    }
    assert_eq!(i, stats.len(), "batch-norm layer count mismatch in copy");
}
