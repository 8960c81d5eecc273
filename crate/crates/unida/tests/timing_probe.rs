use std::time::Instant;
use rand_chacha::rand_core::SeedableRng;
use unida::dataset::build_unida_task;
use unida::eval;
use unida::exec::default_mode;
use unida::ma::{train_ma, train_source_only, MaConfig, SourceSide, WeightFlags};
use unida::nn::models::{pretrain_source_model, DomainDiscriminator, Generator, StyleNetwork};
use unida::rng::{stream, Stream};
use unida::sdg::{train_sdg, SdgConfig};
use unida::synth::{desk_spec, synthesize_dataset};

fn evaluate(tag: &str, f: &unida::nn::models::FeatureExtractor, c: &unida::nn::models::Classifier,
            ds: &unida::nn::models::DomainDiscriminator, target: &unida::dataset::DomainDataset,
            task: &unida::dataset::UniDATask, w0: f64) {
    let mode = default_mode();
    let truths = eval::ground_truth(task, target).unwrap();
    let cache = eval::cache_scores(f, c, ds, target, 64, mode);
    let preds = eval::predictions_from_cache(&cache, w0, WeightFlags::default()).unwrap();
    let report = eval::score(&preds, &truths, task).unwrap();
    println!("{tag}: avg_all {:.3} avg_shared {:?} unknown {:?}",
        report.avg_all, report.avg_shared.map(|v| (v*1000.0).round()/1000.0),
        report.unknown_accuracy().map(|v| (v*1000.0).round()/1000.0));
}

#[test]
fn timing_probe() {
    let mode = default_mode();
    let seed = 7u64;
    let spec = desk_spec(seed);
    let (source, target) = synthesize_dataset(&spec, mode).unwrap();
    let task = build_unida_task(source.label_set(), target.label_set()).unwrap();
    let w0 = 0.6; // jaccard 4/9 >= 0.2
    let mut m = pretrain_source_model(&source, 400, 32, 0.001, seed, mode).unwrap();
    println!("pretrain acc {:.3}", m.train_accuracy);

    // source-only baseline
    let t0 = Instant::now();
    let mut ds0 = DomainDiscriminator::new(&mut stream(seed, Stream::InitDiscSim));
    let cfg_so = MaConfig { iterations: 300, seed, ..MaConfig::default() };
    let so = train_source_only(&source, &target, &m, &mut ds0, &cfg_so, mode);
    println!("source-only D' 300 steps: {:.1}s", t0.elapsed().as_secs_f64());
    evaluate("source-only", &so.feature, &so.classifier, &so.disc_sim, &target, &task, w0);

    // MA with real source
    let t0 = Instant::now();
    let mut da = DomainDiscriminator::new(&mut stream(seed, Stream::InitDiscAdv));
    let mut dsim = DomainDiscriminator::new(&mut stream(seed, Stream::InitDiscSim));
    let cfg_ma = MaConfig { iterations: 600, seed, ..MaConfig::default() };
    let ma_real = train_ma(SourceSide::Real(&source), &target, &m, &mut da, &mut dsim, &cfg_ma, mode).unwrap();
    println!("MA(real) 600 steps: {:.1}s", t0.elapsed().as_secs_f64());
    evaluate("MA(real)", &ma_real.feature, &ma_real.classifier, &ma_real.disc_sim, &target, &task, w0);

    // SDG then MA with synthetic source
    let style = StyleNetwork::fixed();
    let mut gen = Generator::new(6, 10, 32, &mut stream(seed, Stream::InitGenerator)).unwrap();
    let cfg_sdg = SdgConfig { iterations: 400, eval_every: 100, seed, ..SdgConfig::default() };
    let t0 = Instant::now();
    let rep = train_sdg(&mut m, &style, &mut gen, &target, &cfg_sdg, mode);
    println!("sdg 400 steps: {:.1}s best recovery {:.3}", t0.elapsed().as_secs_f64(), rep.best_recovery);
    let mut da2 = DomainDiscriminator::new(&mut stream(seed+1, Stream::InitDiscAdv));
    let mut dsim2 = DomainDiscriminator::new(&mut stream(seed+1, Stream::InitDiscSim));
    let t0 = Instant::now();
    let sdg_ma = train_ma(SourceSide::Generated(&gen), &target, &m, &mut da2, &mut dsim2, &cfg_ma, mode).unwrap();
    println!("MA(synthetic) 600 steps: {:.1}s", t0.elapsed().as_secs_f64());
    evaluate("SDG-MA", &sdg_ma.feature, &sdg_ma.classifier, &sdg_ma.disc_sim, &target, &task, w0);

    // MA-only: random generator
    let gen0 = Generator::new(6, 10, 32, &mut stream(seed+2, Stream::InitGenerator)).unwrap();
    let mut da3 = DomainDiscriminator::new(&mut stream(seed+2, Stream::InitDiscAdv));
    let mut dsim3 = DomainDiscriminator::new(&mut stream(seed+2, Stream::InitDiscSim));
    let ma_only = train_ma(SourceSide::Generated(&gen0), &target, &m, &mut da3, &mut dsim3, &cfg_ma, mode).unwrap();
    evaluate("MA-only", &ma_only.feature, &ma_only.classifier, &ma_only.disc_sim, &target, &task, w0);
}
