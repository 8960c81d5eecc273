//! Stage II — model adaptation. Computes per-sample transferable weights
//! from domain similarity and prediction confidence, aligns source and
//! target features with a weighted adversarial loss through gradient
//! reversal, trains the classifier on (synthetic) source labels, and
//! rejects unknown target classes by thresholding the transferable weight.

use ndarray::{concatenate, s, Array1, Array2, Array4, Axis};
use rand::seq::SliceRandom;
use thiserror::Error;

use crate::dataset::{DomainDataset, DomainRole};
use crate::exec::ExecMode;
use crate::nn::models::{
    clone_classifier, clone_feature, reverse_gradient, reverse_gradient_backward, Classifier,
    DomainDiscriminator, FeatureExtractor, Generator, PretrainedModel,
};
use crate::nn::ops::{self, safe_ln};
use crate::nn::optim::{grl_lambda, InvDecay, SgdMomentum};
use crate::rng::{self, Stream};
use crate::sdg::sample_latent;

#[derive(Debug, Error)]
pub enum MaError {
    #[error("transferable weight inputs must lie in [0,1]: d={d}, confidence={conf}")]
    WeightOutOfRange { d: f64, conf: f64 },
    #[error(
        "adaptation diverged: classifier loss {loss:.4} stayed above 10x its initial value \
         {initial:.4} for {window} consecutive steps (aborted at step {step})"
    )]
    Diverged { step: usize, loss: f64, initial: f64, window: usize },
    #[error("source label {index} out of range for {classes} classes")]
    LabelOutOfRange { index: usize, classes: usize },
}

/// Which weight terms are active. Dropping a term reproduces the
/// "without domain similarity" / "without confidence" ablations.
#[derive(Clone, Copy, Debug, Default, serde::Serialize, serde::Deserialize)]
pub struct WeightFlags {
    pub disable_domain_similarity: bool,
    pub disable_confidence: bool,
}

/// Raw target-side transferable weight `w_t = d + max ȳ` (range [0, 2]).
pub fn transferable_weight_target(d: f64, conf: f64, flags: WeightFlags) -> Result<f64, MaError> {
    check_unit(d, conf)?;
    let ds = if flags.disable_domain_similarity { 0.0 } else { d };
    let cs = if flags.disable_confidence { 0.0 } else { conf };
    Ok(ds + cs)
}

/// Raw source-side transferable weight `w_f = -d - max ȳ` (range [-2, 0]).
pub fn transferable_weight_source(d: f64, conf: f64, flags: WeightFlags) -> Result<f64, MaError> {
    Ok(-transferable_weight_target(d, conf, flags)?)
}

fn check_unit(d: f64, conf: f64) -> Result<(), MaError> {
    if !(0.0..=1.0).contains(&d) || !(0.0..=1.0).contains(&conf) {
        return Err(MaError::WeightOutOfRange { d, conf });
    }
    Ok(())
}

/// Min-max normalize a batch of raw weights into [0, 1]. A constant batch
/// (including a singleton) maps to 0.5 everywhere.
pub fn normalize_weights(raw: &[f64]) -> Vec<f64> {
    assert!(!raw.is_empty(), "normalize_weights needs at least one value");
    let min = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let max = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max - min <= f64::EPSILON * min.abs().max(1.0) {
        return vec![0.5; raw.len()];
    }
    raw.iter().map(|&w| (w - min) / (max - min)).collect()
}

/// Domain similarity d(x) = D'(F(x)) for every row of `x`.
pub fn domain_similarity(
    disc_sim: &DomainDiscriminator,
    feature: &FeatureExtractor,
    x: &Array4<f64>,
    mode: ExecMode,
) -> Array1<f64> {
    disc_sim.domain_probability(&feature.features(x, mode), mode)
}

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

/// Weighted domain-adversarial loss over discriminator probabilities:
/// `-E[w_f log p_f] - E[w_t log (1 - p_t)]`, each expectation over its own
/// batch. Weights must already be normalized and are treated as constants.
pub fn adversarial_loss(
    p_src: &Array1<f64>,
    p_tgt: &Array1<f64>,
    w_src: &Array1<f64>,
    w_tgt: &Array1<f64>,
) -> f64 {
    assert_eq!(p_src.len(), w_src.len());
    assert_eq!(p_tgt.len(), w_tgt.len());
    let src = p_src
        .iter()
        .zip(w_src)
        .map(|(&p, &w)| -w * safe_ln(p))
        .sum::<f64>()
        / p_src.len().max(1) as f64;
    let tgt = p_tgt
        .iter()
        .zip(w_tgt)
        .map(|(&p, &w)| -w * safe_ln(1.0 - p))
        .sum::<f64>()
        / p_tgt.len().max(1) as f64;
    src + tgt
}

/// Gradients of [`adversarial_loss`] with respect to the discriminator
/// logits (source rows, then target rows).
pub fn adversarial_grad_logits(
    p_src: &Array1<f64>,
    p_tgt: &Array1<f64>,
    w_src: &Array1<f64>,
    w_tgt: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let bs = p_src.len().max(1) as f64;
    let bt = p_tgt.len().max(1) as f64;
    let g_src = Array1::from_iter(
        p_src
            .iter()
            .zip(w_src)
            .map(|(&p, &w)| w * (p - 1.0) / bs),
    );
    let g_tgt = Array1::from_iter(p_tgt.iter().zip(w_tgt).map(|(&p, &w)| w * p / bt));
    (g_src, g_tgt)
}

/// Mean cross-entropy of classifier probabilities against source labels.
pub fn source_ce_loss(probs: &Array2<f64>, labels: &[usize]) -> Result<f64, MaError> {
    let classes = probs.ncols();
    for &l in labels {
        if l >= classes {
            return Err(MaError::LabelOutOfRange { index: l, classes });
        }
    }
    let targets = ops::one_hot(labels, classes);
    Ok(ops::cross_entropy_probs(&targets, probs))
}

/// Binary cross-entropy training signal for the non-adversarial
/// discriminator: source rows toward 1, target rows toward 0.
pub fn similarity_loss(p_src: &Array1<f64>, p_tgt: &Array1<f64>) -> f64 {
    let ones = Array1::ones(p_src.len());
    adversarial_loss(p_src, p_tgt, &ones, &Array1::ones(p_tgt.len()))
}

/// Gradients of [`similarity_loss`] w.r.t. the discriminator logits.
pub fn similarity_grad_logits(
    p_src: &Array1<f64>,
    p_tgt: &Array1<f64>,
) -> (Array1<f64>, Array1<f64>) {
    let ones_s = Array1::ones(p_src.len());
    let ones_t = Array1::ones(p_tgt.len());
    adversarial_grad_logits(p_src, p_tgt, &ones_s, &ones_t)
}

// ---------------------------------------------------------------------------
// Prediction
// ---------------------------------------------------------------------------

/// A thresholded prediction for one target sample. `class_index` (into the
/// source label set) is present iff the raw transferable weight exceeded
/// the threshold; ties reject.
#[derive(Clone, Debug, serde::Serialize)]
pub struct Prediction {
    pub sample_id: usize,
    /// `None` marks the sample "unknown".
    pub class_index: Option<usize>,
    pub w_t: f64,
    pub d: f64,
    pub conf: f64,
    pub threshold: f64,
}

impl Prediction {
    pub fn is_unknown(&self) -> bool {
        self.class_index.is_none()
    }
}

/// Classify target samples with unknown rejection: compute d and max ȳ,
/// form the raw transferable weight, and predict `argmax ȳ` only when
/// `w_t > w0` (strict).
pub fn predict(
    feature: &FeatureExtractor,
    classifier: &Classifier,
    disc_sim: &DomainDiscriminator,
    x: &Array4<f64>,
    sample_ids: &[usize],
    w0: f64,
    flags: WeightFlags,
    mode: ExecMode,
) -> Result<Vec<Prediction>, MaError> {
    assert!(w0 >= 0.0, "decision threshold must be nonnegative");
    assert_eq!(x.shape()[0], sample_ids.len());
    let feats = feature.features(x, mode);
    let probs = classifier.proba(&feats, mode);
    let conf = ops::max_rows(&probs);
    let argmax = ops::argmax_rows(&probs);
    let d = disc_sim.domain_probability(&feats, mode);
    let mut out = Vec::with_capacity(sample_ids.len());
    for i in 0..sample_ids.len() {
        let w_t = transferable_weight_target(d[i], conf[i], flags)?;
        out.push(Prediction {
            sample_id: sample_ids[i],
            class_index: (w_t > w0).then_some(argmax[i]),
            w_t,
            d: d[i],
            conf: conf[i],
            threshold: w0,
        });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Ordering diagnostics
// ---------------------------------------------------------------------------

/// Probe-group tags for the expectation-ordering diagnostic.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, serde::Serialize)]
pub enum ProbeGroup {
    SourcePrivate,
    SourceShared,
    TargetShared,
    TargetPrivate,
}

pub const PROBE_GROUPS: [ProbeGroup; 4] = [
    ProbeGroup::SourcePrivate,
    ProbeGroup::SourceShared,
    ProbeGroup::TargetShared,
    ProbeGroup::TargetPrivate,
];

/// Group means of d and confidence plus the empirical status of each of
/// the six pairwise inequalities expected of a trained model (groups
/// ordered source-private > source-shared > target-shared > target-private
/// for both quantities). Purely diagnostic — never asserted in training.
#[derive(Clone, Debug, serde::Serialize)]
pub struct OrderingDiagnostic {
    /// Mean (d, conf) per group, `None` when the group had no samples.
    pub group_means: Vec<(ProbeGroup, Option<(f64, f64)>)>,
    /// For each ordered pair (earlier group, later group): whether the
    /// earlier mean exceeded the later mean; `None` if either was empty.
    pub d_pairs: Vec<((ProbeGroup, ProbeGroup), Option<bool>)>,
    pub conf_pairs: Vec<((ProbeGroup, ProbeGroup), Option<bool>)>,
}

impl OrderingDiagnostic {
    pub fn mean_of(&self, group: ProbeGroup) -> Option<(f64, f64)> {
        self.group_means
            .iter()
            .find(|(g, _)| *g == group)
            .and_then(|(_, m)| *m)
    }

    /// How many of the six inequalities hold for (d, conf).
    pub fn holds(&self) -> (usize, usize) {
        let c = |pairs: &[((ProbeGroup, ProbeGroup), Option<bool>)]| {
            pairs.iter().filter(|(_, v)| *v == Some(true)).count()
        };
        (c(&self.d_pairs), c(&self.conf_pairs))
    }
}

/// Build the diagnostic from per-sample scores.
pub fn ordering_from_scores(scores: &[(ProbeGroup, f64, f64)]) -> OrderingDiagnostic {
    let mean_for = |g: ProbeGroup| -> Option<(f64, f64)> {
        let xs: Vec<(f64, f64)> = scores
            .iter()
            .filter(|(gg, _, _)| *gg == g)
            .map(|(_, d, c)| (*d, *c))
            .collect();
        if xs.is_empty() {
            None
        } else {
            let n = xs.len() as f64;
            Some((
                xs.iter().map(|(d, _)| d).sum::<f64>() / n,
                xs.iter().map(|(_, c)| c).sum::<f64>() / n,
            ))
        }
    };
    let means: Vec<(ProbeGroup, Option<(f64, f64)>)> =
        PROBE_GROUPS.iter().map(|&g| (g, mean_for(g))).collect();
    let mut d_pairs = Vec::new();
    let mut conf_pairs = Vec::new();
    for i in 0..PROBE_GROUPS.len() {
        for j in (i + 1)..PROBE_GROUPS.len() {
            let (gi, gj) = (PROBE_GROUPS[i], PROBE_GROUPS[j]);
            let cmp = |pick: fn(&(f64, f64)) -> f64| -> Option<bool> {
                match (means[i].1, means[j].1) {
                    (Some(a), Some(b)) => Some(pick(&a) > pick(&b)),
                    _ => None,
                }
            };
            d_pairs.push(((gi, gj), cmp(|m| m.0)));
            conf_pairs.push(((gi, gj), cmp(|m| m.1)));
        }
    }
    OrderingDiagnostic { group_means: means, d_pairs, conf_pairs }
}

/// Evaluate d and confidence for labeled probe sets and build the
/// expectation-ordering diagnostic.
pub fn ordering_diagnostic(
    feature: &FeatureExtractor,
    classifier: &Classifier,
    disc_sim: &DomainDiscriminator,
    probes: &[(ProbeGroup, Array4<f64>)],
    mode: ExecMode,
) -> OrderingDiagnostic {
    let mut scores = Vec::new();
    for (group, x) in probes {
        if x.shape()[0] == 0 {
            continue;
        }
        let feats = feature.features(x, mode);
        let probs = classifier.proba(&feats, mode);
        let conf = ops::max_rows(&probs);
        let d = disc_sim.domain_probability(&feats, mode);
        for i in 0..x.shape()[0] {
            scores.push((*group, d[i], conf[i]));
        }
    }
    ordering_from_scores(&scores)
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Where adaptation's source batches come from.
pub enum SourceSide<'a> {
    /// Real labeled source data (adaptation with source data).
    Real(&'a DomainDataset),
    /// On-the-fly generation from a (trained or deliberately untrained)
    /// generator.
    Generated(&'a Generator),
}

/// Configuration of the adaptation stage.
#[derive(Clone, Debug)]
pub struct MaConfig {
    pub iterations: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_flags: WeightFlags,
    pub seed: u64,
    /// Log every this many steps.
    pub log_every: usize,
    /// Divergence guard: abort when the source CE loss exceeds 10x its
    /// initial value for this many consecutive steps.
    pub divergence_window: usize,
}

impl Default for MaConfig {
    fn default() -> Self {
        MaConfig {
            iterations: 4000,
            batch_size: 32,
            learning_rate: 0.001,
            momentum: 0.9,
            weight_flags: WeightFlags::default(),
            seed: 0,
            log_every: 50,
            divergence_window: 200,
        }
    }
}

/// One logged adaptation step.
#[derive(Clone, Debug, serde::Serialize)]
pub struct MaRow {
    pub step: usize,
    pub adversarial_loss: f64,
    pub source_ce_loss: f64,
    pub similarity_loss: f64,
    pub mean_weight_source: f64,
    pub mean_weight_target: f64,
    pub grl_lambda: f64,
}

/// Adapted components plus the training log.
pub struct MaOutcome {
    pub feature: FeatureExtractor,
    pub classifier: Classifier,
    pub disc_adv: DomainDiscriminator,
    pub disc_sim: DomainDiscriminator,
    pub log: Vec<MaRow>,
}

struct EpochSampler {
    order: Vec<usize>,
    cursor: usize,
}

impl EpochSampler {
    fn new(n: usize) -> Self {
        EpochSampler { order: (0..n).collect(), cursor: n }
    }

    fn draw(&mut self, k: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Vec<usize> {
        let mut out = Vec::with_capacity(k);
        while out.len() < k {
            if self.cursor >= self.order.len() {
                self.order.shuffle(rng);
                self.cursor = 0;
            }
            out.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        out
    }
}

/// Run the adaptation stage (Algorithm stage II). Per mini-batch:
/// transferable weights are computed with the current models, D is updated
/// to sharpen the weighted domain loss, F and C are updated through
/// gradient reversal to fool D while fitting the source labels, and D' is
/// updated on detached features toward source=1 / target=0.
pub fn train_ma(
    source: SourceSide<'_>,
    target: &DomainDataset,
    pretrained: &PretrainedModel,
    disc_adv: &mut DomainDiscriminator,
    disc_sim: &mut DomainDiscriminator,
    cfg: &MaConfig,
    mode: ExecMode,
) -> Result<MaOutcome, MaError> {
    let mut feature = clone_feature(&pretrained.feature);
    let mut classifier = clone_classifier(&pretrained.classifier);
    let num_classes = classifier.num_classes;

    let mut batch_rng = rng::stream(cfg.seed, Stream::BatchSampling);
    let mut latent_rng = rng::stream(cfg.seed, Stream::Latent);
    let decay = Some(InvDecay::default());
    let mut opt_f = SgdMomentum::new(cfg.learning_rate, cfg.momentum, true, decay);
    let mut opt_c = SgdMomentum::new(cfg.learning_rate, cfg.momentum, true, decay);
    let mut opt_d = SgdMomentum::new(cfg.learning_rate, cfg.momentum, true, decay);
    let mut opt_ds = SgdMomentum::new(cfg.learning_rate, cfg.momentum, true, decay);

    let mut target_sampler = EpochSampler::new(target.len());
    let mut source_sampler = match source {
        SourceSide::Real(ds) => {
            assert!(
                ds.role() != DomainRole::Target,
                "source side must not be a target-role dataset"
            );
            Some(EpochSampler::new(ds.len()))
        }
        SourceSide::Generated(_) => None,
    };

    let mut log = Vec::new();
    let mut initial_ce: Option<f64> = None;
    let mut high_ce_streak = 0usize;
    let b = cfg.batch_size;

    for step in 0..cfg.iterations {
        let progress = step as f64 / cfg.iterations.max(1) as f64;
        let lambda = grl_lambda(progress);

        // --- assemble batches -------------------------------------------------
        let (x_f, labels_f): (Array4<f64>, Vec<usize>) = match source {
            SourceSide::Real(ds) => {
                let idx = source_sampler
                    .as_mut()
                    .expect("real source has a sampler")
                    .draw(b, &mut batch_rng);
                (ds.batch(&idx), ds.batch_train_labels(&idx))
            }
            SourceSide::Generated(gen) => {
                let latent = sample_latent(b, num_classes, gen.z_dim, &mut latent_rng);
                let x = gen.generate(&gen.latent_input(&latent.y, &latent.z), mode);
                (x, latent.labels)
            }
        };
        let idx_t = target_sampler.draw(b, &mut batch_rng);
        let x_t = target.batch(&idx_t);

        // --- joint forward ----------------------------------------------------
        let x_all = concatenate![Axis(0), x_f.view(), x_t.view()];
        let feats = feature.forward_train(&x_all, mode);
        let feats_f = feats.slice(s![..b, ..]).to_owned();

        // --- transferable weights from the current models ---------------------
        // Computed as plain numbers (never part of the gradient graph).
        let probs_now = ops::softmax_rows(&classifier.logits(&feats, mode));
        let conf_now = ops::max_rows(&probs_now);
        let d_now = disc_sim.domain_probability(&feats, mode);
        let mut raw_f = Vec::with_capacity(b);
        let mut raw_t = Vec::with_capacity(b);
        for i in 0..b {
            raw_f.push(transferable_weight_source(
                d_now[i],
                conf_now[i],
                cfg.weight_flags,
            )?);
            raw_t.push(transferable_weight_target(
                d_now[b + i],
                conf_now[b + i],
                cfg.weight_flags,
            )?);
        }
        let w_f = Array1::from_vec(normalize_weights(&raw_f));
        let w_t = Array1::from_vec(normalize_weights(&raw_t));

        // classifier on source rows
        let logits_f = classifier.logits_train(&feats_f, mode);
        let probs_f = ops::softmax_rows(&logits_f);
        let ce = source_ce_loss(&probs_f, &labels_f)?;
        let targets_f = ops::one_hot(&labels_f, num_classes);
        let g_logits_ce = ops::softmax_ce_grad(&probs_f, &targets_f);
        let g_feat_ce = classifier.backward(&g_logits_ce, mode);

        // adversarial discriminator on all rows (reached through reversal)
        let feats_rev = reverse_gradient(&feats, lambda);
        let logit_d = disc_adv.logit_train(&feats_rev, mode);
        let p_all = logit_d.mapv(ops::sigmoid);
        let p_src = p_all.slice(s![..b]).to_owned();
        let p_tgt = p_all.slice(s![b..]).to_owned();
        let adv = adversarial_loss(&p_src, &p_tgt, &w_f, &w_t);
        let (g_src, g_tgt) = adversarial_grad_logits(&p_src, &p_tgt, &w_f, &w_t);
        let g_logit_d = concatenate![Axis(0), g_src.view(), g_tgt.view()];
        let g_feats_rev = disc_adv.backward(&g_logit_d, mode);
        let g_feat_adv = reverse_gradient_backward(&g_feats_rev, lambda);

        // total gradient into the feature extractor
        let mut g_feats = g_feat_adv;
        {
            let mut top = g_feats.slice_mut(s![..b, ..]);
            top += &g_feat_ce;
        }
        feature.backward(&g_feats, mode);

        // non-adversarial discriminator on detached features (its input
        // gradient is discarded, so F never sees this loss)
        let logit_ds = disc_sim.logit_train(&feats, mode);
        let pd_all = logit_ds.mapv(ops::sigmoid);
        let pd_src = pd_all.slice(s![..b]).to_owned();
        let pd_tgt = pd_all.slice(s![b..]).to_owned();
        let simi = similarity_loss(&pd_src, &pd_tgt);
        let (gs, gt) = similarity_grad_logits(&pd_src, &pd_tgt);
        let g_logit_ds = concatenate![Axis(0), gs.view(), gt.view()];
        disc_sim.backward(&g_logit_ds, mode); // input gradient discarded: detached

        // --- updates ----------------------------------------------------------
        opt_f.step(&mut feature.net, progress);
        opt_c.step(&mut classifier.net, progress);
        opt_d.step(&mut disc_adv.net, progress);
        opt_ds.step(&mut disc_sim.net, progress);

        // --- divergence guard + log -------------------------------------------
        let init = *initial_ce.get_or_insert(ce.max(1e-3));
        if ce > 10.0 * init {
            high_ce_streak += 1;
            if high_ce_streak >= cfg.divergence_window {
                return Err(MaError::Diverged {
                    step,
                    loss: ce,
                    initial: init,
                    window: cfg.divergence_window,
                });
            }
        } else {
            high_ce_streak = 0;
        }

        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.iterations {
            log.push(MaRow {
                step: step + 1,
                adversarial_loss: adv,
                source_ce_loss: ce,
                similarity_loss: simi,
                mean_weight_source: w_f.mean().unwrap_or(0.0),
                mean_weight_target: w_t.mean().unwrap_or(0.0),
                grl_lambda: lambda,
            });
        }
    }

    Ok(MaOutcome {
        feature,
        classifier,
        disc_adv: clone_discriminator_out(disc_adv),
        disc_sim: clone_discriminator_out(disc_sim),
        log,
    })
}

fn clone_discriminator_out(d: &DomainDiscriminator) -> DomainDiscriminator {
    crate::nn::models::clone_discriminator(d)
}

/// The source-only baseline: F and C stay frozen at the pre-trained model;
/// only D' is trained (source = 1, target = 0) so the transferable weight
/// of the decision rule is well defined at test time.
pub fn train_source_only(
    source: &DomainDataset,
    target: &DomainDataset,
    pretrained: &PretrainedModel,
    disc_sim: &mut DomainDiscriminator,
    cfg: &MaConfig,
    mode: ExecMode,
) -> MaOutcome {
    let feature = clone_feature(&pretrained.feature);
    let classifier = clone_classifier(&pretrained.classifier);
    let mut batch_rng = rng::stream(cfg.seed, Stream::BatchSampling);
    let mut opt_ds = SgdMomentum::new(cfg.learning_rate, cfg.momentum, true, Some(InvDecay::default()));
    let mut src_sampler = EpochSampler::new(source.len());
    let mut tgt_sampler = EpochSampler::new(target.len());
    let mut log = Vec::new();
    let b = cfg.batch_size;
    for step in 0..cfg.iterations {
        let progress = step as f64 / cfg.iterations.max(1) as f64;
        let idx_f = src_sampler.draw(b, &mut batch_rng);
        let idx_t = tgt_sampler.draw(b, &mut batch_rng);
        let x_all = concatenate![
            Axis(0),
            source.batch(&idx_f).view(),
            target.batch(&idx_t).view()
        ];
        let feats = feature.features(&x_all, mode);
        let logit = disc_sim.logit_train(&feats, mode);
        let p = logit.mapv(ops::sigmoid);
        let p_src = p.slice(s![..b]).to_owned();
        let p_tgt = p.slice(s![b..]).to_owned();
        let simi = similarity_loss(&p_src, &p_tgt);
        let (gs, gt) = similarity_grad_logits(&p_src, &p_tgt);
        let g = concatenate![Axis(0), gs.view(), gt.view()];
        disc_sim.backward(&g, mode);
        opt_ds.step(&mut disc_sim.net, progress);
        if (step + 1) % cfg.log_every == 0 || step + 1 == cfg.iterations {
            log.push(MaRow {
                step: step + 1,
                adversarial_loss: 0.0,
                source_ce_loss: 0.0,
                similarity_loss: simi,
                mean_weight_source: 0.0,
                mean_weight_target: 0.0,
                grl_lambda: 0.0,
            });
        }
    }
    MaOutcome {
        feature,
        classifier,
        disc_adv: clone_discriminator_out(disc_sim),
        disc_sim: clone_discriminator_out(disc_sim),
        log,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn weight_arithmetic() {
        let flags = WeightFlags::default();
        assert!((transferable_weight_target(0.9, 0.8, flags).unwrap() - 1.7).abs() < 1e-12);
        assert!((transferable_weight_source(0.9, 0.8, flags).unwrap() + 1.7).abs() < 1e-12);
        assert_eq!(transferable_weight_target(0.0, 0.0, flags).unwrap(), 0.0);
        let no_d = WeightFlags { disable_domain_similarity: true, disable_confidence: false };
        assert_eq!(transferable_weight_target(0.9, 0.8, no_d).unwrap(), 0.8);
        let no_c = WeightFlags { disable_domain_similarity: false, disable_confidence: true };
        assert_eq!(transferable_weight_target(0.9, 0.8, no_c).unwrap(), 0.9);
        assert!(transferable_weight_target(1.2, 0.5, flags).is_err());
    }

    #[test]
    fn normalization_examples() {
        let n = normalize_weights(&[0.2, 1.0, 1.8]);
        assert!((n[0] - 0.0).abs() < 1e-12);
        assert!((n[1] - 0.5).abs() < 1e-12);
        assert!((n[2] - 1.0).abs() < 1e-12);
        assert_eq!(normalize_weights(&[0.7, 0.7, 0.7]), vec![0.5, 0.5, 0.5]);
        assert_eq!(normalize_weights(&[0.3]), vec![0.5]);
    }

    #[test]
    fn adversarial_loss_examples() {
        // all weights one, p = 0.5 on both sides: -ln 0.5 - ln 0.5
        let p = Array1::from_elem(4, 0.5);
        let w = Array1::ones(4);
        let loss = adversarial_loss(&p, &p, &w, &w);
        assert!((loss - 2.0 * (2.0f64).ln()).abs() < 1e-12);
        // all weights zero: loss 0, gradients 0
        let zero = Array1::zeros(4);
        assert_eq!(adversarial_loss(&p, &p, &zero, &zero), 0.0);
        let (gs, gt) = adversarial_grad_logits(&p, &p, &zero, &zero);
        assert!(gs.iter().chain(gt.iter()).all(|g| *g == 0.0));
    }

    #[test]
    fn similarity_loss_examples() {
        let ones = Array1::from_elem(3, 1.0 - 1e-12);
        let zeros = Array1::from_elem(3, 1e-12);
        assert!(similarity_loss(&ones, &zeros).abs() < 1e-9);
        let half = Array1::from_elem(3, 0.5);
        assert!((similarity_loss(&half, &half) - 2.0 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn source_ce_examples() {
        let probs = array![[1.0, 0.0, 0.0]];
        assert_eq!(source_ce_loss(&probs, &[0]).unwrap(), 0.0);
        let k = 20;
        let probs = Array2::from_elem((1, k), 1.0 / k as f64);
        assert!((source_ce_loss(&probs, &[3]).unwrap() - (k as f64).ln()).abs() < 1e-12);
        assert!(source_ce_loss(&probs, &[25]).is_err());
    }

    #[test]
    fn prediction_rule() {
        // strict threshold via direct construction of weights
        let flags = WeightFlags::default();
        let w = transferable_weight_target(0.45, 0.4, flags).unwrap();
        assert!((w - 0.85).abs() < 1e-12);
        assert!(w > 0.8);
        let tie = transferable_weight_target(0.4, 0.4, flags).unwrap();
        assert!(!(tie > 0.8)); // w_t == w0 rejects
    }

    #[test]
    fn ordering_diagnostic_from_constructed_scores() {
        // perfectly separated groups
        let mut scores = Vec::new();
        for (g, d, c) in [
            (ProbeGroup::SourcePrivate, 0.95, 0.99),
            (ProbeGroup::SourceShared, 0.8, 0.9),
            (ProbeGroup::TargetShared, 0.6, 0.8),
            (ProbeGroup::TargetPrivate, 0.2, 0.4),
        ] {
            for k in 0..5 {
                scores.push((g, d + 0.001 * k as f64, c - 0.001 * k as f64));
            }
        }
        let diag = ordering_from_scores(&scores);
        assert_eq!(diag.holds(), (6, 6));
        // single group present: every comparison not-applicable
        let only = vec![(ProbeGroup::TargetShared, 0.5, 0.5)];
        let diag = ordering_from_scores(&only);
        assert!(diag.d_pairs.iter().all(|(_, v)| v.is_none()));
        assert!(diag.conf_pairs.iter().all(|(_, v)| v.is_none()));
    }
}
