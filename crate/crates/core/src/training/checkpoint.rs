//! Binary checkpoints.
//!
//! Layout: the magic `OCCKPT01`, then tagged sections, each a 4-byte tag, a
//! little-endian `u64` payload length and the payload. Numbers are
//! little-endian; parameters are stored as `f64` so a reload is exact.
//!
//! | tag    | payload                                           |
//! |--------|---------------------------------------------------|
//! | `CONF` | config text, as written by [`TrainConfig::to_text`] |
//! | `ITER` | iteration (`u64`) and Adam step (`u64`)           |
//! | `GRID` | hash-table features                               |
//! | `MLP_` | MLP weights and biases                            |
//! | `OFFS` | vertex offsets, scale-major xyz                   |
//! | `ATTN` | attention scores, scale-major                     |
//! | `MOMS` | Adam first then second moments, groups in order  |

use std::path::Path;

use super::{TrainConfig, TrainState};
use crate::autodiff::Group;
use crate::error::{Error, Result};
use crate::geometry::ArticulatedMesh;

const MAGIC: &[u8; 8] = b"OCCKPT01";

fn section(out: &mut Vec<u8>, tag: &[u8; 4], payload: &[u8]) {
    out.extend_from_slice(tag);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
}

fn floats(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn to_bytes(cfg: &TrainConfig, state: &TrainState) -> Vec<u8> {
    let f = &state.field;
    let mut out = MAGIC.to_vec();
    section(&mut out, b"CONF", cfg.to_text().as_bytes());
    let mut iter = (state.iteration as u64).to_le_bytes().to_vec();
    iter.extend_from_slice(&state.adam.step.to_le_bytes());
    section(&mut out, b"ITER", &iter);
    section(&mut out, b"GRID", &floats(f.grid.params()));
    section(&mut out, b"MLP_", &floats(f.mlp.params()));
    section(&mut out, b"OFFS", &floats(&f.surface.flat_offsets()));
    let attn: Vec<f64> = f.surface.scales.iter().flat_map(|s| s.attention().iter().copied()).collect();
    section(&mut out, b"ATTN", &floats(&attn));
    let mut moms = Vec::new();
    for g in Group::ALL {
        moms.extend_from_slice(state.adam.moments(g).0);
    }
    for g in Group::ALL {
        moms.extend_from_slice(state.adam.moments(g).1);
    }
    section(&mut out, b"MOMS", &floats(&moms));
    out
}

pub fn save(path: &Path, cfg: &TrainConfig, state: &TrainState) -> Result<()> {
    std::fs::write(path, to_bytes(cfg, state)).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    bytes: &'b [u8],
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        if self.bytes.len() < n {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let (head, rest) = self.bytes.split_at(n);
        self.bytes = rest;
        Ok(head)
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<&'b [u8]> {
        let t = self.take(4)?;
        if t != tag {
            return Err(Error::Checkpoint(format!(
                "expected section {}, found {}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(t)
            )));
        }
        let len = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        let len = usize::try_from(len).map_err(|_| Error::Checkpoint("section too large".into()))?;
        self.take(len)
    }
}

fn read_floats(payload: &[u8], expected: usize, what: &str) -> Result<Vec<f64>> {
    if payload.len() != 8 * expected {
        return Err(Error::Checkpoint(format!(
            "{what}: expected {expected} values, found {} bytes",
            payload.len()
        )));
    }
    Ok(payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

/// Rebuilds the config and state; `template` must be the mesh the
/// checkpoint was trained on.
pub fn from_bytes(bytes: &[u8], template: &ArticulatedMesh) -> Result<(TrainConfig, TrainState)> {
    let mut r = Reader { bytes };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint file".into()));
    }
    let text = std::str::from_utf8(r.section(b"CONF")?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let mut cfg = TrainConfig::default();
    cfg.apply_text(text)?;
    let iter = r.section(b"ITER")?;
    if iter.len() != 16 {
        return Err(Error::Checkpoint("malformed iteration section".into()));
    }
    let mut state = TrainState::new(template, &cfg)?;
    state.iteration = u64::from_le_bytes(iter[..8].try_into().unwrap()) as usize;
    state.adam.step = u64::from_le_bytes(iter[8..].try_into().unwrap());

    let f = &mut state.field;
    let grid = read_floats(r.section(b"GRID")?, f.grid.params().len(), "hash grid")?;
    f.grid.params_mut().copy_from_slice(&grid);
    let mlp = read_floats(r.section(b"MLP_")?, f.mlp.params().len(), "MLP")?;
    f.mlp.params_mut().copy_from_slice(&mlp);
    let offs = read_floats(r.section(b"OFFS")?, 3 * f.surface.num_vertices(), "vertex offsets")?;
    f.surface.load_flat_offsets(&offs)?;
    let attn = read_floats(r.section(b"ATTN")?, f.surface.num_vertices(), "attention")?;
    let mut at = 0;
    for sc in &mut f.surface.scales {
        let n = sc.len();
        sc.attention_mut().copy_from_slice(&attn[at..at + n]);
        at += n;
    }
    let sizes = Group::ALL.map(|g| state.field.num_params(g));
    let total: usize = sizes.iter().sum();
    let moms = read_floats(r.section(b"MOMS")?, 2 * total, "optimizer moments")?;
    let mut at = 0;
    for half in 0..2 {
        for (g, n) in Group::ALL.into_iter().zip(sizes) {
            let (m, v) = state.adam.moments_mut(g);
            let dst = if half == 0 { m } else { v };
            dst.copy_from_slice(&moms[at..at + n]);
            at += n;
        }
    }
    if !r.bytes.is_empty() {
        return Err(Error::Checkpoint("trailing bytes".into()));
    }
    Ok((cfg, state))
}

pub fn load(path: &Path, template: &ArticulatedMesh) -> Result<(TrainConfig, TrainState)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, template)
}
