//! Checkpoint files: one file per component with the experiment config and
//! seed embedded, a JSON header and raw little-endian f64 parameter blobs.
//!
//! Layout: magic `UNCK`, u32 version, u64 header length, header JSON,
//! then parameters in visit order, then batch-norm running statistics
//! (mean, var per layer) when the architecture has them.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, ArrayD, IxDyn};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::Sequential;
use super::models::{
    apply_bn_stats, collect_bn_stats, Classifier, DomainDiscriminator, FeatureExtractor, Generator,
};
use super::NnError;

const MAGIC: &[u8; 4] = b"UNCK";
const VERSION: u32 = 1;

/// Which component a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Component {
    FeatureExtractor,
    Classifier,
    DiscriminatorAdv,
    DiscriminatorSim,
    Generator,
}

/// Architecture hyperparameters needed to rebuild a component.
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct Arch {
    pub image_size: usize,
    pub num_classes: usize,
    pub z_dim: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub component: Component,
    pub seed: u64,
    pub arch: Arch,
    /// Snapshot of the experiment configuration that produced the weights.
    pub config: serde_json::Value,
    pub param_shapes: Vec<Vec<usize>>,
    pub bn_layers: usize,
}

fn io_err(e: impl std::fmt::Display) -> NnError {
    NnError::Checkpoint(e.to_string())
}

/// Write a component checkpoint.
pub fn save(
    path: &Path,
    component: Component,
    seed: u64,
    arch: Arch,
    config: serde_json::Value,
    net: &Sequential,
) -> Result<(), NnError> {
    let mut shapes = Vec::new();
    net.visit_params_ref(&mut |p| shapes.push(p.value.shape().to_vec()));
    let bn_stats = collect_bn_stats(net);
    let header = CheckpointHeader {
        component,
        seed,
        arch,
        config,
        param_shapes: shapes,
        bn_layers: bn_stats.len(),
    };
    let header_bytes = serde_json::to_vec(&header).map_err(io_err)?;

    let file = File::create(path).map_err(io_err)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes())
        .map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    let mut write_failed = None;
    net.visit_params_ref(&mut |p| {
        if write_failed.is_none() {
            for &v in p.value.iter() {
                if let Err(e) = w.write_all(&v.to_le_bytes()) {
                    write_failed = Some(e);
                    break;
                }
            }
        }
    });
    if let Some(e) = write_failed {
        return Err(io_err(e));
    }
    for (mean, var) in &bn_stats {
        for &v in mean.iter().chain(var.iter()) {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

/// Read just the header of a checkpoint.
pub fn read_header(path: &Path) -> Result<CheckpointHeader, NnError> {
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    read_header_from(&mut r)
}

fn read_header_from(r: &mut impl Read) -> Result<CheckpointHeader, NnError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(NnError::Checkpoint("bad magic".into()));
    }
    let mut v = [0u8; 4];
    r.read_exact(&mut v).map_err(io_err)?;
    if u32::from_le_bytes(v) != VERSION {
        return Err(NnError::Checkpoint("unsupported version".into()));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len).map_err(io_err)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes).map_err(io_err)?;
    serde_json::from_slice(&header_bytes).map_err(io_err)
}

fn read_f64s(r: &mut impl Read, n: usize) -> Result<Vec<f64>, NnError> {
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(io_err)?;
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

/// Fill `net` from the checkpoint body, validating shapes against the header.
fn load_into(
    r: &mut impl Read,
    header: &CheckpointHeader,
    net: &mut Sequential,
) -> Result<(), NnError> {
    let mut params: Vec<ArrayD<f64>> = Vec::with_capacity(header.param_shapes.len());
    for shape in &header.param_shapes {
        let n: usize = shape.iter().product();
        let data = read_f64s(r, n)?;
        params.push(
            ArrayD::from_shape_vec(IxDyn(shape), data)
                .map_err(|e| NnError::Checkpoint(e.to_string()))?,
        );
    }
    let mut i = 0usize;
    let mut mismatch = None;
    net.visit_params(&mut |p| {
        if mismatch.is_some() {
            return;
        }
        if i >= params.len() || params[i].shape() != p.value.shape() {
            mismatch = Some(format!(
                "parameter {i} shape mismatch: file {:?} vs model {:?}",
                params.get(i).map(|a| a.shape().to_vec()),
                p.value.shape()
            ));
            return;
        }
        p.value.assign(&params[i]);
        p.grad.fill(0.0);
        i += 1;
    });
    if let Some(m) = mismatch {
        return Err(NnError::Checkpoint(m));
    }
    if i != params.len() {
        return Err(NnError::Checkpoint(format!(
            "checkpoint has {} parameters, model has {i}",
            params.len()
        )));
    }
    if header.bn_layers > 0 {
        let template = collect_bn_stats(net);
        if template.len() != header.bn_layers {
            return Err(NnError::Checkpoint(format!(
                "checkpoint has {} batch-norm layers, model has {}",
                header.bn_layers,
                template.len()
            )));
        }
        let mut stats = Vec::with_capacity(template.len());
        for (mean, _) in &template {
            let m = read_f64s(r, mean.len())?;
            let v = read_f64s(r, mean.len())?;
            stats.push((Array1::from_vec(m), Array1::from_vec(v)));
        }
        apply_bn_stats(net, &stats);
    }
    Ok(())
}

fn open_and_check(path: &Path, want: Component) -> Result<(BufReader<File>, CheckpointHeader), NnError> {
    let file = File::open(path).map_err(io_err)?;
    let mut r = BufReader::new(file);
    let header = read_header_from(&mut r)?;
    if header.component != want {
        return Err(NnError::Checkpoint(format!(
            "expected a {want:?} checkpoint, found {:?}",
            header.component
        )));
    }
    Ok((r, header))
}

pub fn load_feature_extractor(path: &Path) -> Result<(FeatureExtractor, CheckpointHeader), NnError> {
    let (mut r, header) = open_and_check(path, Component::FeatureExtractor)?;
    let mut model = FeatureExtractor::new(header.arch.image_size, &mut ChaCha8Rng::seed_from_u64(0));
    load_into(&mut r, &header, &mut model.net)?;
    Ok((model, header))
}

pub fn load_classifier(path: &Path) -> Result<(Classifier, CheckpointHeader), NnError> {
    let (mut r, header) = open_and_check(path, Component::Classifier)?;
    let mut model = Classifier::new(header.arch.num_classes, &mut ChaCha8Rng::seed_from_u64(0));
    load_into(&mut r, &header, &mut model.net)?;
    Ok((model, header))
}

pub fn load_discriminator(
    path: &Path,
    which: Component,
) -> Result<(DomainDiscriminator, CheckpointHeader), NnError> {
    let (mut r, header) = open_and_check(path, which)?;
    let mut model = DomainDiscriminator::new(&mut ChaCha8Rng::seed_from_u64(0));
    load_into(&mut r, &header, &mut model.net)?;
    Ok((model, header))
}

pub fn load_generator(path: &Path) -> Result<(Generator, CheckpointHeader), NnError> {
    let (mut r, header) = open_and_check(path, Component::Generator)?;
    let mut model = Generator::new(
        header.arch.num_classes,
        header.arch.z_dim,
        header.arch.image_size,
        &mut ChaCha8Rng::seed_from_u64(0),
    )?;
    load_into(&mut r, &header, &mut model.net)?;
    Ok((model, header))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::checksum::params_checksum;

    #[test]
    fn generator_checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("gen.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let gen = Generator::new(5, 10, 16, &mut rng).unwrap();
        let arch = Arch { image_size: 16, num_classes: 5, z_dim: 10 };
        save(
            &path,
            Component::Generator,
            77,
            arch,
            serde_json::json!({"note": "test"}),
            &gen.net,
        )
        .unwrap();
        let (loaded, header) = load_generator(&path).unwrap();
        assert_eq!(header.seed, 77);
        assert_eq!(params_checksum(&gen.net), params_checksum(&loaded.net));
    }

    #[test]
    fn component_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = Classifier::new(4, &mut rng);
        save(
            &path,
            Component::Classifier,
            1,
            Arch { image_size: 0, num_classes: 4, z_dim: 0 },
            serde_json::Value::Null,
            &c.net,
        )
        .unwrap();
        assert!(load_generator(&path).is_err());
    }
}
