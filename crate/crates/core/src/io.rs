//! Portable on-disk formats: raw tensors, checkpoints, PGM/PPM images.
//!
//! All multi-byte fields are little-endian. Writers go through a
//! temp-file-plus-rename so readers never observe partial files.

use crate::config::ModelConfig;
use crate::error::StorageError;
use crate::mask::BinaryMask;
use crate::nn::ParamRegistry;
use crate::tensor::Tensor;
use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::sync::OnceLock;

const TSR_MAGIC: &[u8; 4] = b"TSR1";
const CKPT_MAGIC: &[u8; 4] = b"SFCK";
const DTYPE_F32: u8 = 0;

fn io_err(path: &Path, source: std::io::Error) -> StorageError {
    StorageError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn pstr(path: &Path) -> String {
    path.display().to_string()
}

/// Writes via a sibling temp file and rename, so partially written files are
/// never visible under the target name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), StorageError> {
    let tmp = path.with_extension("tmp~");
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.sync_all().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

// ---------------------------------------------------------------------------
// CRC32 (IEEE, reflected)
// ---------------------------------------------------------------------------

fn crc32_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc32_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    !c
}

// ---------------------------------------------------------------------------
// TSR: raw tensor file
// ---------------------------------------------------------------------------

/// Serializes a tensor: magic, dtype, ndim, u32 extents, f32 payload.
pub fn encode_tsr(t: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(6 + 4 * t.rank() + 4 * t.numel());
    out.extend_from_slice(TSR_MAGIC);
    out.push(DTYPE_F32);
    out.push(t.rank() as u8);
    for &e in t.shape() {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

/// Parses one TSR blob from the front of `bytes`; returns the tensor and the
/// number of bytes consumed.
pub fn decode_tsr(bytes: &[u8], path: &Path) -> Result<(Tensor, usize), StorageError> {
    if bytes.len() < 6 {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    if &bytes[0..4] != TSR_MAGIC {
        return Err(StorageError::BadMagic {
            path: pstr(path),
            expected: "TSR1".into(),
        });
    }
    let dtype = bytes[4];
    if dtype != DTYPE_F32 {
        return Err(StorageError::UnknownDtype {
            path: pstr(path),
            code: dtype,
        });
    }
    let ndim = bytes[5] as usize;
    let header = 6 + 4 * ndim;
    if bytes.len() < header {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    let mut shape = Vec::with_capacity(ndim);
    for d in 0..ndim {
        let off = 6 + 4 * d;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let numel: usize = shape.iter().product();
    let total = header + 4 * numel;
    if bytes.len() < total {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    let data: Vec<f32> = bytes[header..total]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let t = Tensor::new(shape, data).map_err(|e| StorageError::Other {
        path: pstr(path),
        msg: e.to_string(),
    })?;
    Ok((t, total))
}

pub fn write_tsr(path: &Path, t: &Tensor) -> Result<(), StorageError> {
    atomic_write(path, &encode_tsr(t))
}

pub fn read_tsr(path: &Path) -> Result<Tensor, StorageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (t, consumed) = decode_tsr(&bytes, path)?;
    if consumed != bytes.len() {
        return Err(StorageError::Other {
            path: pstr(path),
            msg: format!("{} trailing bytes after payload", bytes.len() - consumed),
        });
    }
    Ok(t)
}

// ---------------------------------------------------------------------------
// Checkpoint: named tensors + CRC
// ---------------------------------------------------------------------------

/// Reserved entry holding the model config as JSON bytes widened to f32.
pub const CONFIG_ENTRY: &str = "__config__";

fn bytes_to_f32_tensor(bytes: &[u8]) -> Tensor {
    Tensor::new(vec![bytes.len()], bytes.iter().map(|&b| b as f32).collect()).expect("1-d")
}

fn f32_tensor_to_bytes(t: &Tensor) -> Vec<u8> {
    t.data().iter().map(|&v| v as u8).collect()
}

pub fn save_checkpoint(path: &Path, entries: &[(String, &Tensor)]) -> Result<(), StorageError> {
    let mut body = Vec::new();
    body.extend_from_slice(CKPT_MAGIC);
    body.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, t) in entries {
        let nb = name.as_bytes();
        body.extend_from_slice(&(nb.len() as u16).to_le_bytes());
        body.extend_from_slice(nb);
        body.extend_from_slice(&encode_tsr(t));
    }
    let crc = crc32(&body);
    body.extend_from_slice(&crc.to_le_bytes());
    atomic_write(path, &body)
}

pub fn load_checkpoint(path: &Path) -> Result<Vec<(String, Tensor)>, StorageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    if bytes.len() < 12 {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    if &bytes[0..4] != CKPT_MAGIC {
        return Err(StorageError::BadMagic {
            path: pstr(path),
            expected: "SFCK".into(),
        });
    }
    let body_len = bytes.len() - 4;
    let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
    let computed = crc32(&bytes[..body_len]);
    if stored != computed {
        return Err(StorageError::CrcMismatch {
            path: pstr(path),
            stored,
            computed,
        });
    }
    let count = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let mut entries = Vec::with_capacity(count);
    let mut off = 8;
    for _ in 0..count {
        if body_len < off + 2 {
            return Err(StorageError::Truncated { path: pstr(path) });
        }
        let nlen = u16::from_le_bytes(bytes[off..off + 2].try_into().unwrap()) as usize;
        off += 2;
        if body_len < off + nlen {
            return Err(StorageError::Truncated { path: pstr(path) });
        }
        let name = String::from_utf8(bytes[off..off + nlen].to_vec()).map_err(|e| {
            StorageError::Other {
                path: pstr(path),
                msg: format!("invalid entry name: {e}"),
            }
        })?;
        off += nlen;
        let (t, consumed) = decode_tsr(&bytes[off..body_len], path)?;
        off += consumed;
        entries.push((name, t));
    }
    if off != body_len {
        return Err(StorageError::Other {
            path: pstr(path),
            msg: format!("{} trailing bytes after last entry", body_len - off),
        });
    }
    let mut seen = std::collections::HashSet::new();
    for (name, _) in &entries {
        if !seen.insert(name.clone()) {
            return Err(StorageError::Other {
                path: pstr(path),
                msg: format!("duplicate entry name {name:?}"),
            });
        }
    }
    Ok(entries)
}

/// Saves parameters, embedded config, and any extra state (names of extras
/// must start with `__`).
pub fn save_model_checkpoint(
    path: &Path,
    cfg: &ModelConfig,
    reg: &ParamRegistry,
    extras: &[(String, Tensor)],
) -> Result<(), StorageError> {
    let cfg_json = serde_json::to_vec(cfg).map_err(|e| StorageError::Other {
        path: pstr(path),
        msg: format!("config serialization failed: {e}"),
    })?;
    let cfg_tensor = bytes_to_f32_tensor(&cfg_json);
    let mut entries: Vec<(String, &Tensor)> = vec![(CONFIG_ENTRY.to_string(), &cfg_tensor)];
    for (_, name, t) in reg.iter() {
        entries.push((name.to_string(), t));
    }
    for (name, t) in extras {
        debug_assert!(name.starts_with("__"), "extra entries use __ names");
        entries.push((name.clone(), t));
    }
    save_checkpoint(path, &entries)
}

/// A loaded model checkpoint: config, parameters, auxiliary state.
pub struct LoadedCheckpoint {
    pub cfg: ModelConfig,
    pub params: HashMap<String, Tensor>,
    pub extras: HashMap<String, Tensor>,
}

pub fn load_model_checkpoint(path: &Path) -> Result<LoadedCheckpoint, StorageError> {
    let entries = load_checkpoint(path)?;
    let mut cfg = None;
    let mut params = HashMap::new();
    let mut extras = HashMap::new();
    for (name, t) in entries {
        if name == CONFIG_ENTRY {
            let json = f32_tensor_to_bytes(&t);
            cfg = Some(
                serde_json::from_slice::<ModelConfig>(&json).map_err(|e| StorageError::Other {
                    path: pstr(path),
                    msg: format!("embedded config is invalid: {e}"),
                })?,
            );
        } else if name.starts_with("__") {
            extras.insert(name, t);
        } else {
            params.insert(name, t);
        }
    }
    let cfg = cfg.ok_or_else(|| StorageError::Other {
        path: pstr(path),
        msg: "checkpoint has no embedded config".into(),
    })?;
    Ok(LoadedCheckpoint {
        cfg,
        params,
        extras,
    })
}

/// Copies loaded parameters into the registry. Every registry name must be
/// present and no loaded name may be left over; offenders are listed.
pub fn apply_params(
    path: &Path,
    params: &HashMap<String, Tensor>,
    reg: &mut ParamRegistry,
) -> Result<(), StorageError> {
    let mut missing = Vec::new();
    let mut extra: Vec<String> = params.keys().cloned().collect();
    let ids: Vec<_> = reg.iter().map(|(id, name, _)| (id, name.to_string())).collect();
    for (_, name) in &ids {
        if params.contains_key(name) {
            extra.retain(|n| n != name);
        } else {
            missing.push(name.clone());
        }
    }
    if !missing.is_empty() || !extra.is_empty() {
        missing.sort();
        extra.sort();
        return Err(StorageError::NameMismatch {
            path: pstr(path),
            missing,
            extra,
        });
    }
    for (id, name) in ids {
        let loaded = &params[&name];
        let dst = reg.get_mut(id);
        if loaded.shape() != dst.shape() {
            return Err(StorageError::Other {
                path: pstr(path),
                msg: format!(
                    "parameter {name:?} has shape {:?}, registry expects {:?}",
                    loaded.shape(),
                    dst.shape()
                ),
            });
        }
        dst.data_mut().copy_from_slice(loaded.data());
        dst.zero_grad();
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// PGM / PPM
// ---------------------------------------------------------------------------

/// Parses a binary PNM header (`P5`/`P6`), returning (width, height, offset
/// of the first payload byte). Whitespace and `#` comments are tolerated.
fn parse_pnm_header(
    bytes: &[u8],
    magic: &str,
    format: &'static str,
    path: &Path,
) -> Result<(usize, usize, usize), StorageError> {
    if bytes.len() < 2 || &bytes[0..2] != magic.as_bytes() {
        return Err(StorageError::BadMagic {
            path: pstr(path),
            expected: magic.into(),
        });
    }
    let mut pos = 2;
    let mut fields = Vec::with_capacity(3);
    while fields.len() < 3 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && bytes[pos].is_ascii_digit() {
            pos += 1;
        }
        if start == pos {
            return Err(StorageError::MalformedHeader {
                path: pstr(path),
                format,
                msg: "expected integer field".into(),
            });
        }
        let text = std::str::from_utf8(&bytes[start..pos]).unwrap();
        fields.push(text.parse::<usize>().map_err(|e| StorageError::MalformedHeader {
            path: pstr(path),
            format,
            msg: e.to_string(),
        })?);
    }
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(StorageError::MalformedHeader {
            path: pstr(path),
            format,
            msg: "missing whitespace after maxval".into(),
        });
    }
    pos += 1;
    let (w, h, maxval) = (fields[0], fields[1], fields[2]);
    if maxval != 255 {
        return Err(StorageError::MalformedHeader {
            path: pstr(path),
            format,
            msg: format!("maxval {maxval}, only 255 supported"),
        });
    }
    Ok((w, h, pos))
}

pub fn write_pgm_mask(path: &Path, mask: &BinaryMask) -> Result<(), StorageError> {
    let (h, w) = mask.dims();
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|&v| if v == 1 { 255u8 } else { 0 }));
    atomic_write(path, &out)
}

pub fn read_pgm_mask(path: &Path) -> Result<BinaryMask, StorageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, off) = parse_pnm_header(&bytes, "P5", "PGM", path)?;
    if bytes.len() < off + w * h {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    let mut data = Vec::with_capacity(w * h);
    for &b in &bytes[off..off + w * h] {
        match b {
            0 => data.push(0u8),
            255 => data.push(1u8),
            v => {
                return Err(StorageError::BadMaskValue {
                    path: pstr(path),
                    value: v,
                })
            }
        }
    }
    Ok(BinaryMask::new(h, w, data))
}

/// Grayscale [0,1] map quantized to 8 bits.
pub fn write_pgm_gray(path: &Path, t: &Tensor) -> Result<(), StorageError> {
    let [h, w] = *t.shape() else {
        return Err(StorageError::Other {
            path: pstr(path),
            msg: format!("expected [H,W] tensor, got {:?}", t.shape()),
        });
    };
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(t.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    atomic_write(path, &out)
}

pub fn read_pgm_gray(path: &Path) -> Result<Tensor, StorageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, off) = parse_pnm_header(&bytes, "P5", "PGM", path)?;
    if bytes.len() < off + w * h {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    let data: Vec<f32> = bytes[off..off + w * h].iter().map(|&b| b as f32 / 255.0).collect();
    Ok(Tensor::new(vec![h, w], data).expect("dims agree"))
}

/// RGB [0,1] image, `[3, H, W]`, quantized to 8 bits per channel.
pub fn write_ppm(path: &Path, t: &Tensor) -> Result<(), StorageError> {
    let [c, h, w] = *t.shape() else {
        return Err(StorageError::Other {
            path: pstr(path),
            msg: format!("expected [3,H,W] tensor, got {:?}", t.shape()),
        });
    };
    if c != 3 {
        return Err(StorageError::Other {
            path: pstr(path),
            msg: format!("expected 3 channels, got {c}"),
        });
    }
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = t.data();
    let plane = h * w;
    for p in 0..plane {
        for ch in 0..3 {
            out.push((d[ch * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    atomic_write(path, &out)
}

pub fn read_ppm(path: &Path) -> Result<Tensor, StorageError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    let (w, h, off) = parse_pnm_header(&bytes, "P6", "PPM", path)?;
    if bytes.len() < off + 3 * w * h {
        return Err(StorageError::Truncated { path: pstr(path) });
    }
    let plane = h * w;
    let mut data = vec![0.0f32; 3 * plane];
    for p in 0..plane {
        for ch in 0..3 {
            data[ch * plane + p] = bytes[off + 3 * p + ch] as f32 / 255.0;
        }
    }
    Ok(Tensor::new(vec![3, h, w], data).expect("dims agree"))
}
