//! Self-describing checkpoints for each component and the three-checkpoint
//! model bundle.
//!
//! A bundle directory holds `asv.ckpt`, `cm.ckpt`, `backend.ckpt` and a
//! `manifest` of `key = value` lines naming the checkpoints and recording the
//! training hyperparameters.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use crate::backend::{Backend, BackendConfig, OcSoftmax};
use crate::encoders::{AsvEncoder, CmEncoder, FrontEndConfig, SubsystemConfig};
use crate::error::{Error, Result};
use crate::nn::{load_checkpoint, read_checkpoint, to_checkpoint_bytes, Activation, Module};
use crate::rng;
use crate::scalar::Scalar;

type Meta = BTreeMap<String, String>;

fn join<V: ToString>(v: &[V]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

fn get<'a>(meta: &'a Meta, key: &str) -> Result<&'a str> {
    meta.get(key)
        .map(String::as_str)
        .ok_or_else(|| Error::Checkpoint(format!("missing meta key `{key}`")))
}

fn get_usize(meta: &Meta, key: &str) -> Result<usize> {
    get(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad integer for `{key}`")))
}

fn get_f64(meta: &Meta, key: &str) -> Result<f64> {
    get(meta, key)?
        .parse()
        .map_err(|_| Error::Checkpoint(format!("bad number for `{key}`")))
}

fn get_list(meta: &Meta, key: &str) -> Result<Vec<usize>> {
    get(meta, key)?
        .split(',')
        .map(|s| s.parse().map_err(|_| Error::Checkpoint(format!("bad list for `{key}`"))))
        .collect()
}

fn put_frontend(meta: &mut Meta, prefix: &str, fe: &FrontEndConfig) {
    meta.insert(format!("{prefix}channels"), join(&fe.channels));
    meta.insert(format!("{prefix}kernels"), join(&fe.kernels));
    meta.insert(format!("{prefix}strides"), join(&fe.strides));
    let acts: Vec<&str> = fe.activations.iter().map(|a| a.name()).collect();
    meta.insert(format!("{prefix}activations"), acts.join(","));
    meta.insert(format!("{prefix}attention_dim"), fe.attention_dim.to_string());
}

fn take_frontend(meta: &Meta, prefix: &str) -> Result<FrontEndConfig> {
    let activations = get(meta, &format!("{prefix}activations"))?
        .split(',')
        .map(|s| Activation::from_name(s).ok_or_else(|| Error::Checkpoint(format!("unknown activation `{s}`"))))
        .collect::<Result<Vec<_>>>()?;
    let fe = FrontEndConfig {
        channels: get_list(meta, &format!("{prefix}channels"))?,
        kernels: get_list(meta, &format!("{prefix}kernels"))?,
        strides: get_list(meta, &format!("{prefix}strides"))?,
        activations,
        attention_dim: get_usize(meta, &format!("{prefix}attention_dim"))?,
    };
    fe.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    Ok(fe)
}

fn asv_meta<T: Scalar>(asv: &AsvEncoder<T>) -> Meta {
    let mut m = Meta::new();
    m.insert("component".into(), "asv".into());
    let fe = FrontEndConfig {
        channels: asv.stack.layers.iter().map(|l| l.out_channels()).collect(),
        kernels: asv.stack.layers.iter().map(|l| l.kernel()).collect(),
        strides: asv.stack.layers.iter().map(|l| l.stride).collect(),
        activations: asv.stack.activations.clone(),
        attention_dim: asv.pool.attention_dim(),
    };
    put_frontend(&mut m, "frontend.", &fe);
    m.insert("embed_dim".into(), asv.embed_dim().to_string());
    m.insert("n_speakers".into(), asv.head.classifier.out_dim().to_string());
    m
}

fn cm_meta<T: Scalar>(cm: &CmEncoder<T>) -> Meta {
    let mut m = Meta::new();
    m.insert("component".into(), "cm".into());
    let fe = FrontEndConfig {
        channels: cm.stack.layers.iter().map(|l| l.out_channels()).collect(),
        kernels: cm.stack.layers.iter().map(|l| l.kernel()).collect(),
        strides: cm.stack.layers.iter().map(|l| l.stride).collect(),
        activations: cm.stack.activations.clone(),
        attention_dim: cm.pool.attention_dim(),
    };
    put_frontend(&mut m, "frontend.", &fe);
    m.insert("embed_dim".into(), cm.embed_dim().to_string());
    m.insert("hidden".into(), cm.hidden.out_dim().to_string());
    m
}

fn backend_meta<T: Scalar>(be: &Backend<T>) -> Meta {
    let mut m = Meta::new();
    m.insert("component".into(), "backend".into());
    let ch: Vec<usize> = be.convs.iter().map(|c| c.out_channels()).collect();
    m.insert("conv_channels".into(), join(&ch));
    m.insert("kernel".into(), be.convs[0].kernel().to_string());
    m.insert("pool_len".into(), be.pool_len.to_string());
    m.insert("hidden".into(), be.fc1.out_dim().to_string());
    m.insert("out".into(), be.fc2.out_dim().to_string());
    m.insert("oc.alpha".into(), be.oc.alpha.to_string());
    m.insert("oc.m_pos".into(), be.oc.m_pos.to_string());
    m.insert("oc.m_neg".into(), be.oc.m_neg.to_string());
    m
}

pub fn asv_to_bytes<T: Scalar>(asv: &AsvEncoder<T>) -> Vec<u8> {
    to_checkpoint_bytes(asv, &asv_meta(asv))
}

pub fn cm_to_bytes<T: Scalar>(cm: &CmEncoder<T>) -> Vec<u8> {
    to_checkpoint_bytes(cm, &cm_meta(cm))
}

pub fn backend_to_bytes<T: Scalar>(be: &Backend<T>) -> Vec<u8> {
    to_checkpoint_bytes(be, &backend_meta(be))
}

fn expect_component(meta: &Meta, kind: &str) -> Result<()> {
    match meta.get("component") {
        Some(k) if k == kind => Ok(()),
        other => Err(Error::Checkpoint(format!("expected a {kind} checkpoint, found {other:?}"))),
    }
}

pub fn asv_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<AsvEncoder<T>> {
    let (header, _) = read_checkpoint(bytes)?;
    let meta = &header.meta;
    expect_component(meta, "asv")?;
    let cfg = SubsystemConfig {
        embed_dim: get_usize(meta, "embed_dim")?,
        asv: take_frontend(meta, "frontend.")?,
        ..SubsystemConfig::default()
    };
    let mut asv = AsvEncoder::new(&cfg, get_usize(meta, "n_speakers")?, &mut rng::stream(0, "skeleton", 0))?;
    load_checkpoint(bytes, &mut asv)?;
    Ok(asv)
}

pub fn cm_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<CmEncoder<T>> {
    let (header, _) = read_checkpoint(bytes)?;
    let meta = &header.meta;
    expect_component(meta, "cm")?;
    let cfg = SubsystemConfig {
        embed_dim: get_usize(meta, "embed_dim")?,
        cm: take_frontend(meta, "frontend.")?,
        cm_hidden: get_usize(meta, "hidden")?,
        ..SubsystemConfig::default()
    };
    let mut cm = CmEncoder::new(&cfg, &mut rng::stream(0, "skeleton", 0))?;
    load_checkpoint(bytes, &mut cm)?;
    Ok(cm)
}

pub fn backend_from_bytes<T: Scalar>(bytes: &[u8]) -> Result<Backend<T>> {
    let (header, _) = read_checkpoint(bytes)?;
    let meta = &header.meta;
    expect_component(meta, "backend")?;
    let cfg = BackendConfig {
        conv_channels: get_list(meta, "conv_channels")?,
        kernel: get_usize(meta, "kernel")?,
        pool_len: get_usize(meta, "pool_len")?,
        hidden: get_usize(meta, "hidden")?,
        out: get_usize(meta, "out")?,
        oc: OcSoftmax {
            alpha: get_f64(meta, "oc.alpha")?,
            m_pos: get_f64(meta, "oc.m_pos")?,
            m_neg: get_f64(meta, "oc.m_neg")?,
        },
    };
    let mut be = Backend::new(&cfg, &mut rng::stream(0, "skeleton", 0))?;
    load_checkpoint(bytes, &mut be)?;
    Ok(be)
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn save_asv<T: Scalar>(path: &Path, asv: &AsvEncoder<T>) -> Result<()> {
    write(path, &asv_to_bytes(asv))
}

pub fn load_asv<T: Scalar>(path: &Path) -> Result<AsvEncoder<T>> {
    asv_from_bytes(&read(path)?)
}

pub fn save_cm<T: Scalar>(path: &Path, cm: &CmEncoder<T>) -> Result<()> {
    write(path, &cm_to_bytes(cm))
}

pub fn load_cm<T: Scalar>(path: &Path) -> Result<CmEncoder<T>> {
    cm_from_bytes(&read(path)?)
}

/// ASV sub-system, CM sub-system and backend classifier of one SASV model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelBundle<T> {
    pub asv: AsvEncoder<T>,
    pub cm: CmEncoder<T>,
    pub backend: Backend<T>,
    /// Hyperparameters recorded alongside the checkpoints.
    pub manifest: BTreeMap<String, String>,
}

impl<T: Scalar> ModelBundle<T> {
    pub const ASV_FILE: &'static str = "asv.ckpt";
    pub const CM_FILE: &'static str = "cm.ckpt";
    pub const BACKEND_FILE: &'static str = "backend.ckpt";
    pub const MANIFEST_FILE: &'static str = "manifest";

    pub fn new(asv: AsvEncoder<T>, cm: CmEncoder<T>, backend: Backend<T>) -> Result<Self> {
        if asv.embed_dim() != cm.embed_dim() {
            return Err(Error::Shape(format!(
                "ASV embedding dim {} differs from CM embedding dim {}",
                asv.embed_dim(),
                cm.embed_dim()
            )));
        }
        Ok(Self {
            asv,
            cm,
            backend,
            manifest: BTreeMap::new(),
        })
    }

    pub fn exists(dir: &Path) -> bool {
        dir.join(Self::MANIFEST_FILE).is_file()
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write(&dir.join(Self::ASV_FILE), &asv_to_bytes(&self.asv))?;
        write(&dir.join(Self::CM_FILE), &cm_to_bytes(&self.cm))?;
        write(&dir.join(Self::BACKEND_FILE), &backend_to_bytes(&self.backend))?;
        let mut m = self.manifest.clone();
        m.insert("checkpoint.asv".into(), Self::ASV_FILE.into());
        m.insert("checkpoint.cm".into(), Self::CM_FILE.into());
        m.insert("checkpoint.backend".into(), Self::BACKEND_FILE.into());
        let text: String = m.iter().map(|(k, v)| format!("{k} = {v}\n")).collect();
        write(&dir.join(Self::MANIFEST_FILE), text.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest_path: PathBuf = dir.join(Self::MANIFEST_FILE);
        if !manifest_path.is_file() {
            return Err(Error::MissingBundle(dir.to_path_buf()));
        }
        let text = std::fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
        let mut manifest = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once(" = ").ok_or_else(|| Error::Parse {
                path: manifest_path.clone(),
                line: i + 1,
                message: "expected `key = value`".into(),
            })?;
            manifest.insert(k.to_string(), v.to_string());
        }
        let file = |key: &str| -> Result<PathBuf> {
            manifest
                .get(key)
                .map(|f| dir.join(f))
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks `{key}`")))
        };
        let asv = asv_from_bytes(&read(&file("checkpoint.asv")?)?)?;
        let cm = cm_from_bytes(&read(&file("checkpoint.cm")?)?)?;
        let backend = backend_from_bytes(&read(&file("checkpoint.backend")?)?)?;
        for k in ["checkpoint.asv", "checkpoint.cm", "checkpoint.backend"] {
            manifest.remove(k);
        }
        let mut b = Self::new(asv, cm, backend)?;
        b.manifest = manifest;
        Ok(b)
    }

    pub fn n_params(&self) -> usize {
        self.asv.num_params() + self.cm.num_params() + self.backend.num_params()
    }
}

impl<T: Scalar> Module<T> for ModelBundle<T> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a crate::nn::Tensor<T>)) {
        self.asv.visit(&format!("{prefix}asv."), f);
        self.cm.visit(&format!("{prefix}cm."), f);
        self.backend.visit(&format!("{prefix}backend."), f);
    }

    fn visit_mut<'a>(&'a mut self, f: &mut dyn FnMut(&'a mut crate::nn::Tensor<T>)) {
        self.asv.visit_mut(f);
        self.cm.visit_mut(f);
        self.backend.visit_mut(f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundle() -> ModelBundle<f32> {
        let cfg = SubsystemConfig::default();
        let mut r = rng::stream(2, "b", 0);
        let asv = AsvEncoder::new(&cfg, 7, &mut r).unwrap();
        let cm = CmEncoder::new(&cfg, &mut r).unwrap();
        let be = Backend::new(&BackendConfig::default(), &mut r).unwrap();
        ModelBundle::new(asv, cm, be).unwrap()
    }

    #[test]
    fn bundle_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = bundle();
        b.manifest.insert("mode".into(), "joint".into());
        b.save(dir.path()).unwrap();
        let back = ModelBundle::<f32>::load(dir.path()).unwrap();
        assert_eq!(back, b);
    }

    #[test]
    fn missing_bundle_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(ModelBundle::<f32>::load(dir.path()), Err(Error::MissingBundle(_))));
    }

    #[test]
    fn component_kind_is_checked() {
        let b = bundle();
        assert!(cm_from_bytes::<f32>(&asv_to_bytes(&b.asv)).is_err());
        assert_eq!(asv_from_bytes::<f32>(&asv_to_bytes(&b.asv)).unwrap(), b.asv);
        assert_eq!(cm_from_bytes::<f32>(&cm_to_bytes(&b.cm)).unwrap(), b.cm);
    }
}
