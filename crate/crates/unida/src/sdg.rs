//! Stage I — source data generation. Trains the conditional generator
//! against the frozen pre-trained model so that synthesized images both
//! recover the source categories (classifier loss) and match the target
//! domain's style statistics (Gram-matrix style loss).

use ndarray::{Array2, Array3, Array4, ArrayView3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::dataset::DomainDataset;
use crate::exec::ExecMode;
use crate::nn::models::{clone_generator, Generator, PretrainedModel, StyleNetwork};
use crate::nn::ops;
use crate::nn::optim::Adam;
use crate::rng::{self, Stream};

/// A batch of latent draws: one-hot class rows and standard-normal noise.
#[derive(Clone, Debug)]
pub struct LatentBatch {
    /// (batch, K) one-hot rows.
    pub y: Array2<f64>,
    /// (batch, z_dim) standard normal rows.
    pub z: Array2<f64>,
    /// Class index per row (argmax of y).
    pub labels: Vec<usize>,
}

/// Draw `batch` latent samples: classes from the uniform categorical over
/// `K`, noise from N(0, I).
pub fn sample_latent(batch: usize, num_classes: usize, z_dim: usize, rng: &mut ChaCha8Rng) -> LatentBatch {
    assert!(batch >= 1 && num_classes >= 1 && z_dim >= 1);
    let labels: Vec<usize> = (0..batch).map(|_| rng.gen_range(0..num_classes)).collect();
    let y = ops::one_hot(&labels, num_classes);
    let normal = StandardNormal;
    let z = Array2::from_shape_fn((batch, z_dim), |_| normal.sample(rng));
    LatentBatch { y, z, labels }
}

/// Classifier loss: mean cross-entropy between sampled one-hot classes and
/// the frozen model's predicted probabilities (log-clamped, never NaN).
pub fn classifier_loss(y: &Array2<f64>, y_bar: &Array2<f64>) -> f64 {
    ops::cross_entropy_probs(y, y_bar)
}

/// Gram matrix of one feature map: `(1 / (C·H·W)) · F·Fᵀ` with `F` the
/// (C, H·W) unfolding. Symmetric and positive semidefinite.
pub fn gram_matrix(map: &ArrayView3<f64>) -> Array2<f64> {
    let (c, h, w) = map.dim();
    let flat = map
        .to_shape((c, h * w))
        .expect("contiguous feature map")
        .into_owned();
    flat.dot(&flat.t()) / (c * h * w) as f64
}

/// Per-sample Gram matrices for a batch of feature maps.
pub fn gram_batch(maps: &Array4<f64>) -> Vec<Array2<f64>> {
    (0..maps.shape()[0])
        .map(|n| gram_matrix(&maps.index_axis(Axis(0), n)))
        .collect()
}

/// Style loss from the two sides' tap activations: the squared Frobenius
/// norm of per-tap Gram differences, summed over taps, averaged over the
/// batch. Samples are paired by position.
pub fn style_loss_from_taps(taps_f: &[Array4<f64>], taps_t: &[Array4<f64>]) -> f64 {
    assert_eq!(taps_f.len(), taps_t.len(), "tap count mismatch");
    let batch = taps_f[0].shape()[0];
    assert!(taps_t.iter().all(|t| t.shape()[0] == batch), "batch size mismatch");
    let mut total = 0.0;
    for (tf, tt) in taps_f.iter().zip(taps_t) {
        for n in 0..batch {
            let gf = gram_matrix(&tf.index_axis(Axis(0), n));
            let gt = gram_matrix(&tt.index_axis(Axis(0), n));
            let diff = &gf - &gt;
            total += (&diff * &diff).sum();
        }
    }
    total / batch as f64
}

/// Style loss between two image batches through the frozen style network.
pub fn style_loss(
    style: &StyleNetwork,
    x_f: &Array4<f64>,
    x_t: &Array4<f64>,
    mode: ExecMode,
) -> f64 {
    assert_eq!(x_f.shape()[0], x_t.shape()[0], "batches must pair by position");
    let taps_f = style.activations(x_f, mode);
    let taps_t = style.activations(x_t, mode);
    style_loss_from_taps(&taps_f, &taps_t)
}

/// Style loss and its gradient with respect to the generated images.
/// Only the generated side receives gradient; the target side is data.
pub fn style_loss_and_input_grad(
    style: &StyleNetwork,
    x_f: &Array4<f64>,
    x_t: &Array4<f64>,
    mode: ExecMode,
) -> (f64, Array4<f64>) {
    let batch = x_f.shape()[0];
    assert_eq!(batch, x_t.shape()[0], "batches must pair by position");
    let cache_f = style.forward_with_cache(x_f, mode);
    let taps_t = style.activations(x_t, mode);
    let taps_f = cache_f.taps();

    let mut loss = 0.0;
    let mut tap_grads: Vec<Array4<f64>> = Vec::with_capacity(taps_f.len());
    for (tf, tt) in taps_f.iter().zip(&taps_t) {
        let (_, c, h, w) = tf.dim();
        let scale = 1.0 / (c * h * w) as f64;
        let mut grad = Array4::<f64>::zeros(tf.dim());
        for n in 0..batch {
            let f_flat = tf
                .index_axis(Axis(0), n)
                .to_shape((c, h * w))
                .expect("contiguous")
                .into_owned();
            let gf = gram_matrix(&tf.index_axis(Axis(0), n));
            let gt = gram_matrix(&tt.index_axis(Axis(0), n));
            let diff = &gf - &gt;
            loss += (&diff * &diff).sum();
            // d/dF of |FFᵀs - Gt|² (batch-mean): (4 s / B) · diff · F
            let g_flat = diff.dot(&f_flat) * (4.0 * scale / batch as f64);
            grad.index_axis_mut(Axis(0), n).assign(
                &g_flat
                    .into_shape_with_order((c, h, w))
                    .expect("same length"),
            );
        }
        tap_grads.push(grad);
    }
    let grad_x = style.backward_to_input(&cache_f, &tap_grads, mode);
    (loss / batch as f64, grad_x)
}

/// Configuration of the generation stage.
#[derive(Clone, Debug)]
pub struct SdgConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Multiplier on the style term (the stage objective sums the two
    /// losses unweighted; this stays 1.0 unless explicitly overridden).
    pub style_weight: f64,
    pub disable_classifier_loss: bool,
    pub disable_style_loss: bool,
    pub seed: u64,
    /// Evaluate category recovery every this many steps.
    pub eval_every: usize,
    /// Number of latent batches used per recovery evaluation.
    pub eval_batches: usize,
}

impl Default for SdgConfig {
    fn default() -> Self {
        SdgConfig {
            iterations: 2000,
            batch_size: 32,
            learning_rate: 0.001,
            style_weight: 1.0,
            disable_classifier_loss: false,
            disable_style_loss: false,
            seed: 0,
            eval_every: 100,
            eval_batches: 4,
        }
    }
}

/// One logged step of the generation stage.
#[derive(Clone, Debug, serde::Serialize)]
pub struct SdgRow {
    pub step: usize,
    pub classifier_loss: f64,
    pub style_loss: f64,
    pub recovery_accuracy: f64,
}

/// Outcome of the generation stage.
#[derive(Clone, Debug)]
pub struct SdgReport {
    pub rows: Vec<SdgRow>,
    pub best_step: usize,
    pub best_recovery: f64,
    /// Set when the final generator failed to recover the categories
    /// meaningfully above chance.
    pub warning: Option<String>,
}

/// Category-recovery accuracy: agreement between `argmax M(G(y, z))` and
/// the sampled `y` over fresh latent batches (generator in inference mode).
pub fn recovery_accuracy(
    pretrained: &PretrainedModel,
    generator: &Generator,
    batches: usize,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    mode: ExecMode,
) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for _ in 0..batches {
        let latent = sample_latent(batch_size, generator.num_classes, generator.z_dim, rng);
        let x = generator.generate(&generator.latent_input(&latent.y, &latent.z), mode);
        let probs = pretrained.predict_proba(&x, mode);
        let preds = ops::argmax_rows(&probs);
        correct += preds
            .iter()
            .zip(&latent.labels)
            .filter(|(p, l)| p == l)
            .count();
        total += batch_size;
    }
    correct as f64 / total.max(1) as f64
}

/// Train the generator against the frozen model (Algorithm stage I):
/// per step, sample latents, generate, evaluate classifier + style losses,
/// and descend their sum with Adam. The generator parameters with the best
/// recovery accuracy are restored before returning.
///
/// The target dataset is consumed unlabeled: only images are read.
pub fn train_sdg(
    pretrained: &mut PretrainedModel,
    style: &StyleNetwork,
    generator: &mut Generator,
    target: &DomainDataset,
    cfg: &SdgConfig,
    mode: ExecMode,
) -> SdgReport {
    let frozen_before = pretrained.checksum();
    let num_classes = generator.num_classes;
    let mut latent_rng = rng::stream(cfg.seed, Stream::Latent);
    let mut batch_rng = rng::stream(cfg.seed, Stream::BatchSampling);
    let mut opt = Adam::new(cfg.learning_rate);

    let mut rows = Vec::new();
    let mut best_recovery = f64::NEG_INFINITY;
    let mut best_step = 0usize;
    let mut best_params: Option<Generator> = None;

    let mut running_cls = 0.0;
    let mut running_style = 0.0;
    let mut since_eval = 0usize;

    for step in 0..cfg.iterations {
        let latent = sample_latent(cfg.batch_size, num_classes, generator.z_dim, &mut latent_rng);
        let x_f = generator.generate_train(&generator.latent_input(&latent.y, &latent.z), mode);

        let mut grad_x = Array4::<f64>::zeros(x_f.dim());
        let mut loss_cls = 0.0;
        if !cfg.disable_classifier_loss {
            let logits = pretrained.logits_capturing(&x_f, mode);
            let probs = ops::softmax_rows(&logits);
            loss_cls = classifier_loss(&latent.y, &probs);
            let grad_logits = ops::softmax_ce_grad(&probs, &latent.y);
            grad_x += &pretrained.input_gradient(&grad_logits, mode);
        }

        let mut loss_style = 0.0;
        if !cfg.disable_style_loss {
            // Pair each generated image with one uniformly drawn target image.
            let idx: Vec<usize> = (0..cfg.batch_size)
                .map(|_| batch_rng.gen_range(0..target.len()))
                .collect();
            let x_t = target.batch(&idx);
            let (l, g) = style_loss_and_input_grad(style, &x_f, &x_t, mode);
            loss_style = l;
            grad_x += &(g * cfg.style_weight);
            loss_style *= cfg.style_weight;
        }

        generator.backward(&grad_x, mode);
        opt.step(&mut generator.net);

        running_cls += loss_cls;
        running_style += loss_style;
        since_eval += 1;

        let last = step + 1 == cfg.iterations;
        if (step + 1) % cfg.eval_every == 0 || last {
            let mut eval_rng = rng::stream(cfg.seed ^ 0x5eed, Stream::Latent);
            let recovery = recovery_accuracy(
                pretrained,
                generator,
                cfg.eval_batches,
                cfg.batch_size,
                &mut eval_rng,
                mode,
            );
            rows.push(SdgRow {
                step: step + 1,
                classifier_loss: running_cls / since_eval as f64,
                style_loss: running_style / since_eval as f64,
                recovery_accuracy: recovery,
            });
            running_cls = 0.0;
            running_style = 0.0;
            since_eval = 0;
            if recovery > best_recovery {
                best_recovery = recovery;
                best_step = step + 1;
                best_params = Some(clone_generator(generator));
            }
        }
    }

    if let Some(best) = best_params {
        *generator = best;
    }
    debug_assert_eq!(
        frozen_before,
        pretrained.checksum(),
        "pre-trained model changed during generation"
    );

    let chance = 1.0 / num_classes as f64;
    let final_recovery = if best_recovery.is_finite() { best_recovery } else { 0.0 };
    let warning = if cfg.iterations > 0 && final_recovery < chance + 0.05 {
        Some(format!(
            "generator failed to recover categories: best accuracy {final_recovery:.3} vs chance {chance:.3}"
        ))
    } else {
        None
    };

    SdgReport {
        rows,
        best_step,
        best_recovery: final_recovery.max(0.0),
        warning,
    }
}

/// Draw a class-balanced synthetic source dataset from a trained generator.
pub fn synthesize_source_dataset(
    generator: &Generator,
    label_set: &crate::dataset::LabelSet,
    samples: usize,
    seed: u64,
    mode: ExecMode,
) -> DomainDataset {
    let mut latent_rng = rng::stream(seed, Stream::Latent);
    let mut images: Vec<Array3<f64>> = Vec::with_capacity(samples);
    let mut labels: Vec<Option<usize>> = Vec::with_capacity(samples);
    let chunk = 64usize;
    let mut remaining = samples;
    while remaining > 0 {
        let b = chunk.min(remaining);
        let latent = sample_latent(b, generator.num_classes, generator.z_dim, &mut latent_rng);
        let x = generator.generate(&generator.latent_input(&latent.y, &latent.z), mode);
        for n in 0..b {
            images.push(x.index_axis(Axis(0), n).to_owned());
            labels.push(Some(latent.labels[n]));
        }
        remaining -= b;
    }
    DomainDataset::new(
        crate::dataset::DomainRole::SyntheticSource,
        images,
        labels,
        label_set.clone(),
    )
    .expect("generated images share one shape")
}

/// Mean-squared check helper (test support): brute-force classifier loss.
#[doc(hidden)]
pub fn classifier_loss_scalar_oracle(y: &Array2<f64>, y_bar: &Array2<f64>) -> f64 {
    let mut rows = Vec::new();
    for (t, p) in y.rows().into_iter().zip(y_bar.rows()) {
        let mut s = 0.0;
        for i in 0..t.len() {
            if t[i] != 0.0 {
                s -= t[i] * p[i].max(crate::nn::ops::LOG_EPS).ln();
            }
        }
        rows.push(s);
    }
    rows.iter().sum::<f64>() / rows.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::exec::default_mode;
    use ndarray::array;
    use rand_chacha::rand_core::SeedableRng;

    #[test]
    fn latent_classes_are_uniform() {
        let mut r = ChaCha8Rng::seed_from_u64(123);
        let k = 7;
        let batch = 7000;
        let latent = sample_latent(batch, k, 10, &mut r);
        assert_eq!(latent.z.ncols(), 10);
        let mut counts = vec![0usize; k];
        for &l in &latent.labels {
            counts[l] += 1;
        }
        // binomial 3-sigma bound around batch/k
        let p = 1.0 / k as f64;
        let sigma = (batch as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            assert!(
                (c as f64 - batch as f64 * p).abs() <= 3.0 * sigma,
                "class frequency {c} outside 3 sigma of {}",
                batch as f64 * p
            );
        }
        // one-hot rows
        for row in latent.y.rows() {
            assert_eq!(row.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(row.sum(), 1.0);
        }
    }

    #[test]
    fn single_class_latent_is_trivial() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let latent = sample_latent(1, 1, 3, &mut r);
        assert_eq!(latent.y, array![[1.0]]);
    }

    #[test]
    fn classifier_loss_examples() {
        // perfect prediction
        let y = array![[0.0, 0.0, 1.0]];
        assert_eq!(classifier_loss(&y, &y), 0.0);
        // uniform over 7 classes
        let y = array![[1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]];
        let p = Array2::from_elem((1, 7), 1.0 / 7.0);
        assert!((classifier_loss(&y, &p) - (7.0f64).ln()).abs() < 1e-12);
        // half confidence
        let y = array![[1.0, 0.0, 0.0]];
        let p = array![[0.5, 0.5, 0.0]];
        assert!((classifier_loss(&y, &p) - (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn gram_examples() {
        // all-zero map
        let zeros = Array3::<f64>::zeros((2, 3, 3));
        assert_eq!(gram_matrix(&zeros.view()), Array2::<f64>::zeros((2, 2)));
        // constant one, C=1, H=W=2: sum = 4, / (1*2*2) = 1
        let ones = Array3::<f64>::ones((1, 2, 2));
        let g = gram_matrix(&ones.view());
        assert!((g[[0, 0]] - 1.0).abs() < 1e-15);
        // duplicated channel -> all four entries equal
        let mut m = Array3::<f64>::zeros((2, 2, 2));
        for y in 0..2 {
            for x in 0..2 {
                let v = (y * 2 + x) as f64 + 0.5;
                m[[0, y, x]] = v;
                m[[1, y, x]] = v;
            }
        }
        let g = gram_matrix(&m.view());
        let v = g[[0, 0]];
        for e in g.iter() {
            assert!((e - v).abs() < 1e-12);
        }
    }

    #[test]
    fn style_loss_zero_on_identical_and_positive_otherwise() {
        let style = StyleNetwork::fixed();
        let x = Array4::from_shape_fn((2, 3, 16, 16), |(n, c, h, w)| {
            ((n + c + h + w) as f64 * 0.37).sin().abs()
        });
        assert_eq!(style_loss(&style, &x, &x, default_mode()), 0.0);
        let y = x.mapv(|v| (v * 0.9 + 0.05).clamp(0.0, 1.0));
        assert!(style_loss(&style, &x, &y, default_mode()) >= 0.0);
    }

    #[test]
    fn style_loss_single_tap_hand_value() {
        // Gram [[1]] vs [[3]]: squared Frobenius difference = 4.
        // Constant map of 1 gives G = 1; constant sqrt(3) gives G = 3.
        let a = Array4::from_elem((1, 1, 2, 2), 1.0);
        let b = Array4::from_elem((1, 1, 2, 2), 3.0f64.sqrt());
        let loss = style_loss_from_taps(&[a], &[b]);
        assert!((loss - 4.0).abs() < 1e-12);
    }

    #[test]
    fn style_grad_matches_finite_differences() {
        let style = StyleNetwork::fixed();
        let x = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, h, w)| {
            ((c * 17 + h * 3 + w) as f64 * 0.21).sin() * 0.5 + 0.5
        });
        let t = Array4::from_shape_fn((1, 3, 8, 8), |(_, c, h, w)| {
            ((c * 5 + h * 7 + w) as f64 * 0.13).cos() * 0.5 + 0.5
        });
        let (_, grad) = style_loss_and_input_grad(&style, &x, &t, default_mode());
        let h = 1e-6;
        for idx in [(0usize, 0usize, 0usize, 0usize), (0, 1, 3, 5), (0, 2, 7, 7)] {
            let mut xp = x.clone();
            xp[idx] += h;
            let mut xd = x.clone();
            xd[idx] -= h;
            let up = style_loss(&style, &xp, &t, default_mode());
            let down = style_loss(&style, &xd, &t, default_mode());
            let fd = (up - down) / (2.0 * h);
            assert!(
                (grad[idx] - fd).abs() <= 1e-5 * (1.0 + fd.abs()),
                "at {idx:?}: analytic {} vs fd {fd}",
                grad[idx]
            );
        }
    }
}
