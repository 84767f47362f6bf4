//! Versioned binary checkpoint archives for trained models (fusion +
//! classifier) and generators. One file holds a JSON metadata block and
//! named f64 parameter tensors.

use crate::data::ClassId;
use crate::error::{Error, Result};
use crate::fusion::FusionNetwork;
use crate::generator::{BnModulation, GeneratorArch, ToyGenerator};
use crate::protonet::EmbeddingNetwork;
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"MIRN";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Kind {
    Model,
    Generator,
}

impl Kind {
    fn tag(self) -> u8 {
        match self {
            Kind::Model => 0,
            Kind::Generator => 1,
        }
    }
}

/// Metadata stored with a trained model checkpoint.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelMeta {
    pub config_hash: String,
    pub val_accuracy: f64,
    pub mode: String,
    pub squared_distance: bool,
    pub grid: usize,
    pub encoder_width: usize,
    pub backbone_width: usize,
    pub image_size: usize,
    pub n_aug: usize,
    pub flip_enabled: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GeneratorMeta {
    config_hash: String,
    arch: GeneratorArch,
    class_ids: Vec<u32>,
}

pub struct ModelCheckpoint {
    pub fusion: FusionNetwork,
    pub embedder: EmbeddingNetwork,
    pub meta: ModelMeta,
}

fn write_archive(
    path: &Path,
    kind: Kind,
    meta_json: &[u8],
    params: &[(String, ArrayD<f64>)],
) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_u32::<LittleEndian>(VERSION).map_err(io_err)?;
    w.write_u8(kind.tag()).map_err(io_err)?;
    w.write_u32::<LittleEndian>(meta_json.len() as u32).map_err(io_err)?;
    w.write_all(meta_json).map_err(io_err)?;
    w.write_u32::<LittleEndian>(params.len() as u32).map_err(io_err)?;
    for (name, arr) in params {
        w.write_u32::<LittleEndian>(name.len() as u32).map_err(io_err)?;
        w.write_all(name.as_bytes()).map_err(io_err)?;
        w.write_u32::<LittleEndian>(arr.ndim() as u32).map_err(io_err)?;
        for &d in arr.shape() {
            w.write_u64::<LittleEndian>(d as u64).map_err(io_err)?;
        }
        for &v in arr.iter() {
            w.write_f64::<LittleEndian>(v).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

fn read_archive(path: &Path, expect: Kind) -> Result<(Vec<u8>, BTreeMap<String, ArrayD<f64>>)> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| Error::io(path, e);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err)?;
    if &magic != MAGIC {
        return Err(Error::data(format!(
            "{} is not a checkpoint archive",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>().map_err(io_err)?;
    if version != VERSION {
        return Err(Error::data(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let kind = r.read_u8().map_err(io_err)?;
    if kind != expect.tag() {
        return Err(Error::data(format!(
            "checkpoint {} holds the wrong artifact kind",
            path.display()
        )));
    }
    let meta_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut meta = vec![0u8; meta_len];
    r.read_exact(&mut meta).map_err(io_err)?;
    let count = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
    let mut params = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err)?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::data("checkpoint parameter name is not utf-8"))?;
        let ndim = r.read_u32::<LittleEndian>().map_err(io_err)? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u64::<LittleEndian>().map_err(io_err)? as usize);
        }
        let len = dims.iter().product::<usize>();
        let mut data = vec![0.0f64; len];
        for v in data.iter_mut() {
            *v = r.read_f64::<LittleEndian>().map_err(io_err)?;
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|_| Error::data(format!("bad tensor shape for {name}")))?;
        params.insert(name, arr);
    }
    Ok((meta, params))
}

fn take(
    map: &mut BTreeMap<String, ArrayD<f64>>,
    name: &str,
    shape: &[usize],
) -> Result<ArrayD<f64>> {
    let arr = map
        .remove(name)
        .ok_or_else(|| Error::data(format!("checkpoint missing tensor `{name}`")))?;
    if arr.shape() != shape {
        return Err(Error::ShapeMismatch {
            expected: format!("{shape:?} for {name}"),
            got: format!("{:?}", arr.shape()),
        });
    }
    Ok(arr)
}

fn fusion_state(fusion: &FusionNetwork) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    for (tag, enc) in [
        ("enc_original", &fusion.enc_original),
        ("enc_generated", &fusion.enc_generated),
    ] {
        for (i, conv) in enc.convs.iter().enumerate() {
            out.push((
                format!("fusion.{tag}.conv{i}.weight"),
                conv.weight.clone().into_dyn(),
            ));
            out.push((
                format!("fusion.{tag}.conv{i}.bias"),
                conv.bias.clone().into_dyn(),
            ));
        }
    }
    out.push(("fusion.head.weight".into(), fusion.head.weight.clone().into_dyn()));
    out.push(("fusion.head.bias".into(), fusion.head.bias.clone().into_dyn()));
    out
}

fn load_fusion(
    g: usize,
    encoder_width: usize,
    map: &mut BTreeMap<String, ArrayD<f64>>,
) -> Result<FusionNetwork> {
    let mut rng = crate::rng::rng_from_seed(0);
    let mut fusion = FusionNetwork::new(g, encoder_width, &mut rng);
    for (tag, enc) in [
        ("enc_original", &mut fusion.enc_original),
        ("enc_generated", &mut fusion.enc_generated),
    ] {
        for (i, conv) in enc.convs.iter_mut().enumerate() {
            let w = take(map, &format!("fusion.{tag}.conv{i}.weight"), conv.weight.shape())?;
            conv.weight = w.into_dimensionality().unwrap();
            let b = take(map, &format!("fusion.{tag}.conv{i}.bias"), conv.bias.shape())?;
            conv.bias = b.into_dimensionality().unwrap();
        }
    }
    let w = take(map, "fusion.head.weight", fusion.head.weight.shape())?;
    fusion.head.weight = w.into_dimensionality().unwrap();
    let b = take(map, "fusion.head.bias", fusion.head.bias.shape())?;
    fusion.head.bias = b.into_dimensionality().unwrap();
    Ok(fusion)
}

fn embedder_state(embedder: &EmbeddingNetwork) -> Vec<(String, ArrayD<f64>)> {
    let mut out = Vec::new();
    for (i, block) in embedder.backbone.blocks.iter().enumerate() {
        out.push((
            format!("classifier.block{i}.conv.weight"),
            block.conv.weight.clone().into_dyn(),
        ));
        out.push((
            format!("classifier.block{i}.conv.bias"),
            block.conv.bias.clone().into_dyn(),
        ));
        out.push((
            format!("classifier.block{i}.bn.gamma"),
            block.bn.gamma.clone().into_dyn(),
        ));
        out.push((
            format!("classifier.block{i}.bn.beta"),
            block.bn.beta.clone().into_dyn(),
        ));
        out.push((
            format!("classifier.block{i}.bn.running_mean"),
            block.bn.running_mean.clone().into_dyn(),
        ));
        out.push((
            format!("classifier.block{i}.bn.running_var"),
            block.bn.running_var.clone().into_dyn(),
        ));
    }
    out
}

fn load_embedder(
    width: usize,
    map: &mut BTreeMap<String, ArrayD<f64>>,
) -> Result<EmbeddingNetwork> {
    let mut rng = crate::rng::rng_from_seed(0);
    let mut embedder = EmbeddingNetwork::new(width, &mut rng);
    for (i, block) in embedder.backbone.blocks.iter_mut().enumerate() {
        let w = take(map, &format!("classifier.block{i}.conv.weight"), block.conv.weight.shape())?;
        block.conv.weight = w.into_dimensionality().unwrap();
        let b = take(map, &format!("classifier.block{i}.conv.bias"), block.conv.bias.shape())?;
        block.conv.bias = b.into_dimensionality().unwrap();
        let g = take(map, &format!("classifier.block{i}.bn.gamma"), block.bn.gamma.shape())?;
        block.bn.gamma = g.into_dimensionality().unwrap();
        let bt = take(map, &format!("classifier.block{i}.bn.beta"), block.bn.beta.shape())?;
        block.bn.beta = bt.into_dimensionality().unwrap();
        let rm = take(
            map,
            &format!("classifier.block{i}.bn.running_mean"),
            block.bn.running_mean.shape(),
        )?;
        block.bn.running_mean = rm.into_dimensionality().unwrap();
        let rv = take(
            map,
            &format!("classifier.block{i}.bn.running_var"),
            block.bn.running_var.shape(),
        )?;
        block.bn.running_var = rv.into_dimensionality().unwrap();
    }
    Ok(embedder)
}

/// Save a trained fusion + classifier pair.
pub fn save_model(
    path: &Path,
    fusion: &FusionNetwork,
    embedder: &EmbeddingNetwork,
    meta: &ModelMeta,
) -> Result<()> {
    let mut params = fusion_state(fusion);
    params.extend(embedder_state(embedder));
    let json = serde_json::to_vec(meta).expect("meta serializes");
    write_archive(path, Kind::Model, &json, &params)
}

/// Load a trained fusion + classifier pair.
pub fn load_model(path: &Path) -> Result<ModelCheckpoint> {
    let (meta_bytes, mut map) = read_archive(path, Kind::Model)?;
    let meta: ModelMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::data(format!("bad checkpoint metadata: {e}")))?;
    let fusion = load_fusion(meta.grid, meta.encoder_width, &mut map)?;
    let embedder = load_embedder(meta.backbone_width, &mut map)?;
    if !map.is_empty() {
        return Err(Error::data(format!(
            "checkpoint holds {} unexpected tensors",
            map.len()
        )));
    }
    Ok(ModelCheckpoint {
        fusion,
        embedder,
        meta,
    })
}

fn generator_state(gen: &ToyGenerator) -> Vec<(String, ArrayD<f64>)> {
    let mut out = vec![
        ("generator.fc.weight".to_string(), gen.frozen.fc.weight.clone().into_dyn()),
        ("generator.fc.bias".to_string(), gen.frozen.fc.bias.clone().into_dyn()),
    ];
    for (i, b) in gen.frozen.blocks.iter().enumerate() {
        out.push((format!("generator.block{i}.weight"), b.weight.clone().into_dyn()));
        out.push((format!("generator.block{i}.bias"), b.bias.clone().into_dyn()));
    }
    out.push((
        "generator.final.weight".into(),
        gen.frozen.final_conv.weight.clone().into_dyn(),
    ));
    out.push((
        "generator.final.bias".into(),
        gen.frozen.final_conv.bias.clone().into_dyn(),
    ));
    out.push((
        "generator.embeddings".into(),
        gen.frozen.embeddings.clone().into_dyn(),
    ));
    for (i, layer) in gen.bn.layers.iter().enumerate() {
        match layer {
            BnModulation::Direct { gamma, beta } => {
                out.push((format!("generator.bn{i}.gamma"), gamma.clone().into_dyn()));
                out.push((format!("generator.bn{i}.beta"), beta.clone().into_dyn()));
            }
            BnModulation::Conditional {
                w_gamma,
                b_gamma,
                w_beta,
                b_beta,
            } => {
                out.push((format!("generator.bn{i}.w_gamma"), w_gamma.clone().into_dyn()));
                out.push((format!("generator.bn{i}.b_gamma"), b_gamma.clone().into_dyn()));
                out.push((format!("generator.bn{i}.w_beta"), w_beta.clone().into_dyn()));
                out.push((format!("generator.bn{i}.b_beta"), b_beta.clone().into_dyn()));
            }
        }
    }
    out
}

/// Save a (scratch-trained) generator.
pub fn save_generator(path: &Path, gen: &ToyGenerator, config_hash: &str) -> Result<()> {
    let meta = GeneratorMeta {
        config_hash: config_hash.to_string(),
        arch: gen.frozen.arch.clone(),
        class_ids: gen.frozen.class_ids.iter().map(|c| c.0).collect(),
    };
    let json = serde_json::to_vec(&meta).expect("meta serializes");
    write_archive(path, Kind::Generator, &json, &generator_state(gen))
}

/// Load a generator checkpoint.
pub fn load_generator(path: &Path) -> Result<(ToyGenerator, String)> {
    let (meta_bytes, mut map) = read_archive(path, Kind::Generator)?;
    let meta: GeneratorMeta = serde_json::from_slice(&meta_bytes)
        .map_err(|e| Error::data(format!("bad generator metadata: {e}")))?;
    let classes: std::collections::BTreeSet<ClassId> =
        meta.class_ids.iter().map(|&c| ClassId(c)).collect();
    let mut rng = crate::rng::rng_from_seed(0);
    let mut gen = ToyGenerator::new(meta.arch, &classes, &mut rng)
        .map_err(|e| Error::data(format!("cannot rebuild generator: {e}")))?;
    let w = take(&mut map, "generator.fc.weight", gen.frozen.fc.weight.shape())?;
    gen.frozen.fc.weight = w.into_dimensionality().unwrap();
    let b = take(&mut map, "generator.fc.bias", gen.frozen.fc.bias.shape())?;
    gen.frozen.fc.bias = b.into_dimensionality().unwrap();
    for (i, blk) in gen.frozen.blocks.iter_mut().enumerate() {
        let w = take(&mut map, &format!("generator.block{i}.weight"), blk.weight.shape())?;
        blk.weight = w.into_dimensionality().unwrap();
        let b = take(&mut map, &format!("generator.block{i}.bias"), blk.bias.shape())?;
        blk.bias = b.into_dimensionality().unwrap();
    }
    let w = take(&mut map, "generator.final.weight", gen.frozen.final_conv.weight.shape())?;
    gen.frozen.final_conv.weight = w.into_dimensionality().unwrap();
    let b = take(&mut map, "generator.final.bias", gen.frozen.final_conv.bias.shape())?;
    gen.frozen.final_conv.bias = b.into_dimensionality().unwrap();
    let e = take(&mut map, "generator.embeddings", gen.frozen.embeddings.shape())?;
    gen.frozen.embeddings = e.into_dimensionality().unwrap();
    for (i, layer) in gen.bn.layers.iter_mut().enumerate() {
        match layer {
            BnModulation::Direct { gamma, beta } => {
                *gamma = take(&mut map, &format!("generator.bn{i}.gamma"), gamma.shape())?
                    .into_dimensionality()
                    .unwrap();
                *beta = take(&mut map, &format!("generator.bn{i}.beta"), beta.shape())?
                    .into_dimensionality()
                    .unwrap();
            }
            BnModulation::Conditional {
                w_gamma,
                b_gamma,
                w_beta,
                b_beta,
            } => {
                *w_gamma = take(&mut map, &format!("generator.bn{i}.w_gamma"), w_gamma.shape())?
                    .into_dimensionality()
                    .unwrap();
                *b_gamma = take(&mut map, &format!("generator.bn{i}.b_gamma"), b_gamma.shape())?
                    .into_dimensionality()
                    .unwrap();
                *w_beta = take(&mut map, &format!("generator.bn{i}.w_beta"), w_beta.shape())?
                    .into_dimensionality()
                    .unwrap();
                *b_beta = take(&mut map, &format!("generator.bn{i}.b_beta"), b_beta.shape())?
                    .into_dimensionality()
                    .unwrap();
            }
        }
    }
    if !map.is_empty() {
        return Err(Error::data(format!(
            "generator checkpoint holds {} unexpected tensors",
            map.len()
        )));
    }
    Ok((gen, meta.config_hash))
}
