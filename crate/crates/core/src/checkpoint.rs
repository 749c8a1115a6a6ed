//! Model files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! u64                header length in bytes
//! [u8; len]          UTF-8 header, one `key=value` per line
//! [f64; n]           parameters: layers in flow order, scale net then translation net,
//!                    each net in its serialization order
//! [u8; 32]           SHA-256 of header bytes followed by payload bytes
//! ```
//!
//! The header fully determines `n`; any disagreement is reported as a corrupt payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::encoding::Charset;
use crate::error::{Error, Result};
use crate::flow::{BinaryMask, CouplingLayer, FlowConfig, FlowModel, MaskKind};
use crate::resnet::{OutputKind, ResidualNet, ScaleBound};

pub const FORMAT_NAME: &str = "flowguess-checkpoint";
pub const FORMAT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

/// A model plus the provenance stored alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: FlowModel,
    /// Free-form creation metadata (tool version, training settings, ...).
    pub metadata: BTreeMap<String, String>,
    pub loss_history: Vec<f64>,
}

impl Checkpoint {
    pub fn new(model: FlowModel) -> Self {
        let mut metadata = BTreeMap::new();
        metadata.insert("created_by".to_owned(), format!("flowguess {}", env!("CARGO_PKG_VERSION")));
        Self { model, metadata, loss_history: Vec::new() }
    }
}

fn bound_to_str(b: ScaleBound) -> String {
    match b {
        ScaleBound::Tanh { max } => format!("{max:?}"),
        ScaleBound::Unbounded => "unbounded".to_owned(),
    }
}

fn header_text(ck: &Checkpoint) -> Result<String> {
    let m = &ck.model;
    let cfg = m.config();
    let mut lines: Vec<(String, String)> = vec![
        ("format".into(), FORMAT_NAME.into()),
        ("version".into(), FORMAT_VERSION.to_string()),
        ("dim".into(), cfg.dim.to_string()),
        ("charset_digest".into(), m.charset_digest()),
        ("charset".into(), hex::encode(m.charset().symbols_string().as_bytes())),
        ("layers".into(), cfg.layers.to_string()),
        ("mask_kind".into(), cfg.mask.to_string()),
        ("masks".into(), m.layers().iter().map(|l| l.mask().to_bit_string()).collect::<Vec<_>>().join(",")),
        ("hidden".into(), cfg.hidden.to_string()),
        ("blocks".into(), cfg.blocks.to_string()),
        ("s_max".into(), bound_to_str(cfg.scale_bound)),
        ("param_count".into(), cfg.param_count().to_string()),
    ];
    for (k, v) in &ck.metadata {
        if k.contains(['=', '\n']) || v.contains('\n') {
            return Err(Error::InvalidConfig(format!("metadata entry {k:?} cannot be stored")));
        }
        lines.push((format!("meta.{k}"), v.clone()));
    }
    let history = ck.loss_history.iter().map(|v| format!("{v:?}")).collect::<Vec<_>>().join(",");
    lines.push(("loss_history".into(), history));
    Ok(lines.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect())
}

pub fn to_bytes(ck: &Checkpoint) -> Result<Vec<u8>> {
    let header = header_text(ck)?;
    let params = ck.model.param_count();
    let mut out = Vec::with_capacity(8 + header.len() + params * 8 + DIGEST_LEN);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for slice in ck.model.param_slices() {
        for v in slice {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out[8..]);
    out.extend_from_slice(&digest);
    Ok(out)
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::CorruptPayload(msg.into())
}

fn field<'a>(h: &'a BTreeMap<&str, &str>, key: &str) -> Result<&'a str> {
    h.get(key).copied().ok_or_else(|| corrupt(format!("header is missing {key}")))
}

fn parse_num<T: std::str::FromStr>(h: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
    field(h, key)?.parse().map_err(|_| corrupt(format!("header field {key} is malformed")))
}

pub fn from_bytes(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 8 + DIGEST_LEN {
        return Err(corrupt("file is truncated"));
    }
    let header_len = u64::from_le_bytes(bytes[..8].try_into().expect("8 bytes")) as usize;
    let body_end = bytes.len() - DIGEST_LEN;
    if header_len > body_end - 8 {
        return Err(corrupt("header length exceeds file size"));
    }
    let digest = Sha256::digest(&bytes[8..body_end]);
    if digest.as_slice() != &bytes[body_end..] {
        return Err(corrupt("content digest does not match"));
    }
    let header = std::str::from_utf8(&bytes[8..8 + header_len]).map_err(|_| corrupt("header is not UTF-8"))?;
    let mut h = BTreeMap::new();
    for line in header.lines() {
        let (k, v) = line.split_once('=').ok_or_else(|| corrupt(format!("bad header line {line:?}")))?;
        h.insert(k, v);
    }
    if field(&h, "format")? != FORMAT_NAME {
        return Err(corrupt("not a flowguess checkpoint"));
    }
    let version = field(&h, "version")?;
    if version != FORMAT_VERSION.to_string() {
        return Err(Error::VersionMismatch { found: version.to_owned(), supported: FORMAT_VERSION });
    }

    let symbols = hex::decode(field(&h, "charset")?).map_err(|_| corrupt("charset is not hex"))?;
    let symbols = String::from_utf8(symbols).map_err(|_| corrupt("charset is not UTF-8"))?;
    let charset = Charset::from_symbols(symbols.chars()).map_err(|e| corrupt(e.to_string()))?;
    if charset.digest() != field(&h, "charset_digest")? {
        return Err(corrupt("charset digest does not match the stored alphabet"));
    }
    let scale_bound = match field(&h, "s_max")? {
        "unbounded" => ScaleBound::Unbounded,
        v => ScaleBound::Tanh { max: v.parse().map_err(|_| corrupt("bad s_max"))? },
    };
    let mask: MaskKind = field(&h, "mask_kind")?.parse().map_err(|e: Error| corrupt(e.to_string()))?;
    let config = FlowConfig {
        dim: parse_num(&h, "dim")?,
        layers: parse_num(&h, "layers")?,
        mask,
        hidden: parse_num(&h, "hidden")?,
        blocks: parse_num(&h, "blocks")?,
        scale_bound,
    };
    let declared: usize = parse_num(&h, "param_count")?;
    let payload = &bytes[8 + header_len..body_end];
    if declared != config.param_count() || payload.len() != declared * 8 {
        return Err(corrupt(format!(
            "payload holds {} bytes, header implies {} parameters",
            payload.len(),
            config.param_count()
        )));
    }
    let masks: Vec<&str> = field(&h, "masks")?.split(',').collect();
    if masks.len() != config.layers || masks.iter().any(|m| m.len() != config.dim) {
        return Err(corrupt("mask schedule does not match layer count"));
    }

    let shape = config.net_shape();
    let per_net = shape.param_count();
    let mut values = payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")));
    let mut take = |n: usize| values.by_ref().take(n).collect::<Vec<f64>>();
    let mut layers = Vec::with_capacity(config.layers);
    for bits in masks {
        let mask = BinaryMask::from_bit_string(bits, config.mask).map_err(|e| corrupt(e.to_string()))?;
        let s = ResidualNet::from_params(shape, OutputKind::Scale, scale_bound, take(per_net))?;
        let t = ResidualNet::from_params(shape, OutputKind::Translation, scale_bound, take(per_net))?;
        layers.push(CouplingLayer::new(mask, s, t)?);
    }
    let model = FlowModel::from_layers(config, charset, layers).map_err(|e| corrupt(e.to_string()))?;

    let metadata = h
        .iter()
        .filter_map(|(k, v)| k.strip_prefix("meta.").map(|k| (k.to_owned(), (*v).to_owned())))
        .collect();
    let history = field(&h, "loss_history")?;
    let loss_history = if history.is_empty() {
        Vec::new()
    } else {
        history
            .split(',')
            .map(|v| v.parse().map_err(|_| corrupt("bad loss history")))
            .collect::<Result<Vec<f64>>>()?
    };
    Ok(Checkpoint { model, metadata, loss_history })
}

pub fn save(ck: &Checkpoint, path: &Path) -> Result<()> {
    let bytes = to_bytes(ck)?;
    let tmp = path.with_extension("partial");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    from_bytes(&fs::read(path)?)
}

pub fn save_checkpoint(model: &FlowModel, path: &Path) -> Result<()> {
    save(&Checkpoint::new(model.clone()), path)
}

pub fn load_checkpoint(path: &Path) -> Result<FlowModel> {
    load(path).map(|c| c.model)
}
