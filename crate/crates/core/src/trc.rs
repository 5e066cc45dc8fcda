//! TRC trace files.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic "TRC1" | version u32 = 1 | depth u32 | layer_count u32
//! per layer:
//!   n_rows u32 | d u32 | flags u32
//!   features: n_rows * d f32, row-major
//!   [flags bit0] cls_attention: one f32 per patch token
//!   [flags bit1] sizes: n_rows u32
//!   [flags bit3] original_patches u32, then per row: count u32, count * u32 patch ids
//! ```
//!
//! Flag bit2 marks row 0 as a CLS token. Bits 2 and 3 are only written when
//! needed, so plain patch-token traces use the base layout exactly. Without
//! bit3, provenance is rebuilt as consecutive patch ranges in row order
//! (singletons when sizes are absent).

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::tokens::{LayerTrace, TokenPopulation, TraceLayer};

pub const MAGIC: &[u8; 4] = b"TRC1";
pub const VERSION: u32 = 1;

const FLAG_CLS_ATTENTION: u32 = 1 << 0;
const FLAG_SIZES: u32 = 1 << 1;
const FLAG_CLS_ROW: u32 = 1 << 2;
const FLAG_PROVENANCE: u32 = 1 << 3;
const KNOWN_FLAGS: u32 = FLAG_CLS_ATTENTION | FLAG_SIZES | FLAG_CLS_ROW | FLAG_PROVENANCE;

/// Guards allocation on corrupt headers.
const MAX_ELEMENTS: u64 = 1 << 31;

pub fn load_trace(path: impl AsRef<Path>) -> Result<LayerTrace> {
    let path = path.as_ref();
    let file = File::open(path)
        .map_err(|e| Error::Format(format!("cannot open {}: {e}", path.display())))?;
    read_trace(&mut BufReader::new(file))
}

pub fn save_trace(trace: &LayerTrace, path: impl AsRef<Path>) -> Result<()> {
    trace.validate()?;
    let mut w = BufWriter::new(File::create(path)?);
    write_trace(trace, &mut w)?;
    w.flush()?;
    Ok(())
}

fn eof_as_format(e: io::Error) -> Error {
    if e.kind() == io::ErrorKind::UnexpectedEof {
        Error::Format("truncated trace file".into())
    } else {
        Error::Io(e)
    }
}

pub fn read_trace<R: Read>(r: &mut R) -> Result<LayerTrace> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(eof_as_format)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let version = r.read_u32::<LittleEndian>().map_err(eof_as_format)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let depth = r.read_u32::<LittleEndian>().map_err(eof_as_format)?;
    let count = r.read_u32::<LittleEndian>().map_err(eof_as_format)?;
    let mut layers = Vec::with_capacity(count.min(4096) as usize);
    for l in 0..count {
        let layer = read_layer(r).map_err(|e| match e {
            Error::Format(m) => Error::Format(format!("layer {l}: {m}")),
            other => other,
        })?;
        layers.push(layer);
    }
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(Error::Format("trailing bytes after last layer".into()));
    }
    LayerTrace::new(layers, depth)
}

fn read_u32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<u32>> {
    let mut v = vec![0u32; n];
    r.read_u32_into::<LittleEndian>(&mut v).map_err(eof_as_format)?;
    Ok(v)
}

fn read_f32s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f32>> {
    let mut v = vec![0f32; n];
    r.read_f32_into::<LittleEndian>(&mut v).map_err(eof_as_format)?;
    Ok(v)
}

fn read_layer<R: Read>(r: &mut R) -> Result<TraceLayer> {
    let header = read_u32s(r, 3)?;
    let (n, d, flags) = (header[0] as usize, header[1] as usize, header[2]);
    if flags & !KNOWN_FLAGS != 0 {
        return Err(Error::Format(format!("unknown flag bits {flags:#x}")));
    }
    if (n as u64) * (d as u64) > MAX_ELEMENTS {
        return Err(Error::Format(format!("implausible layer shape {n} x {d}")));
    }
    let has_cls = flags & FLAG_CLS_ROW != 0;
    let features: Vec<f64> = read_f32s(r, n * d)?.into_iter().map(f64::from).collect();
    let features = Array2::from_shape_vec((n, d), features)
        .map_err(|e| Error::Format(e.to_string()))?;
    let n_patches = n.saturating_sub(usize::from(has_cls));
    let cls_attention = if flags & FLAG_CLS_ATTENTION != 0 {
        Some(read_f32s(r, n_patches)?.into_iter().map(f64::from).collect())
    } else {
        None
    };
    let sizes = if flags & FLAG_SIZES != 0 {
        read_u32s(r, n)?
    } else {
        vec![1; n]
    };
    let (provenance, original) = if flags & FLAG_PROVENANCE != 0 {
        let original = read_u32s(r, 1)?[0];
        let mut prov = Vec::with_capacity(n);
        for _ in 0..n {
            let k = read_u32s(r, 1)?[0];
            if u64::from(k) > u64::from(original) {
                return Err(Error::Format(format!("provenance list of {k} exceeds {original}")));
            }
            prov.push(read_u32s(r, k as usize)?);
        }
        (prov, original)
    } else {
        if has_cls && sizes.first() != Some(&1) {
            return Err(Error::validation("CLS row must have size 1"));
        }
        TokenPopulation::canonical_provenance(&sizes, has_cls)
    };
    let population = TokenPopulation::from_parts(features, sizes, provenance, has_cls, original)?;
    Ok(TraceLayer {
        population,
        cls_attention,
    })
}

pub fn write_trace<W: Write>(trace: &LayerTrace, w: &mut W) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(trace.depth)?;
    w.write_u32::<LittleEndian>(trace.layers.len() as u32)?;
    for layer in &trace.layers {
        write_layer(layer, w)?;
    }
    Ok(())
}

fn write_layer<W: Write>(layer: &TraceLayer, w: &mut W) -> Result<()> {
    let pop = &layer.population;
    let write_sizes = pop.sizes().iter().any(|&s| s != 1);
    let write_prov = !pop.has_canonical_provenance();
    let mut flags = 0;
    if layer.cls_attention.is_some() {
        flags |= FLAG_CLS_ATTENTION;
    }
    if write_sizes {
        flags |= FLAG_SIZES;
    }
    if pop.has_cls() {
        flags |= FLAG_CLS_ROW;
    }
    if write_prov {
        flags |= FLAG_PROVENANCE;
    }
    w.write_u32::<LittleEndian>(pop.n_tokens() as u32)?;
    w.write_u32::<LittleEndian>(pop.dim() as u32)?;
    w.write_u32::<LittleEndian>(flags)?;
    for &v in pop.features().iter() {
        w.write_f32::<LittleEndian>(v as f32)?;
    }
    if let Some(att) = &layer.cls_attention {
        for &a in att {
            w.write_f32::<LittleEndian>(a as f32)?;
        }
    }
    if write_sizes {
        for &s in pop.sizes() {
            w.write_u32::<LittleEndian>(s)?;
        }
    }
    if write_prov {
        w.write_u32::<LittleEndian>(pop.original_patches())?;
        for prov in pop.provenance() {
            w.write_u32::<LittleEndian>(prov.len() as u32)?;
            for &p in prov {
                w.write_u32::<LittleEndian>(p)?;
            }
        }
    }
    Ok(())
}

/// Rounds every feature and attention value to f32 precision, the
/// precision at which traces are stored.
pub fn quantize(trace: &LayerTrace) -> LayerTrace {
    let layers = trace
        .layers
        .iter()
        .map(|layer| {
            let pop = &layer.population;
            let features = pop.features().mapv(|v| f64::from(v as f32));
            TraceLayer {
                population: TokenPopulation::with_parts_unchecked(
                    features,
                    pop.sizes().to_vec(),
                    pop.provenance().to_vec(),
                    pop.has_cls(),
                    pop.original_patches(),
                ),
                cls_attention: layer
                    .cls_attention
                    .as_ref()
                    .map(|a| a.iter().map(|&v| f64::from(v as f32)).collect()),
            }
        })
        .collect();
    LayerTrace {
        layers,
        depth: trace.depth,
    }
}
