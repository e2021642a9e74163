//! Token-grid geometry for vision transformers: retiling token sequences into
//! feature maps, positional-embedding resize, layer taps and the learning-rate
//! schedule.

use std::f64::consts::PI;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::resample_bicubic;
use crate::raster::Raster;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenGrid {
    pub seq_len: usize,
    pub hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub has_cls: bool,
}

impl TokenGrid {
    pub fn new(grid_h: usize, grid_w: usize, hidden: usize, has_cls: bool) -> Self {
        TokenGrid {
            seq_len: grid_h * grid_w + has_cls as usize,
            hidden,
            grid_h,
            grid_w,
            has_cls,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let expected = self.grid_h * self.grid_w + self.has_cls as usize;
        if self.seq_len != expected {
            return Err(Error::ShapeMismatch(format!(
                "sequence of {} tokens does not fit a {}x{} grid{}",
                self.seq_len,
                self.grid_h,
                self.grid_w,
                if self.has_cls { " plus CLS" } else { "" }
            )));
        }
        Ok(())
    }

    fn check_len(&self, len: usize, what: &str) -> Result<()> {
        if len != self.seq_len * self.hidden {
            return Err(Error::ShapeMismatch(format!(
                "{what} has {len} values, expected {}x{}",
                self.seq_len, self.hidden
            )));
        }
        Ok(())
    }
}

/// Feature map in channel-major layout: `data[c][row][col]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub hidden: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    pub data: Vec<f32>,
}

impl FeatureMap {
    pub fn at(&self, c: usize, row: usize, col: usize) -> f32 {
        self.data[(c * self.grid_h + row) * self.grid_w + col]
    }
}

/// Drops the CLS token and places sequence token `k` at row `k / grid_w`,
/// column `k % grid_w`. `seq` is `seq_len × hidden`, row-major.
pub fn retile(seq: &[f32], grid: &TokenGrid) -> Result<FeatureMap> {
    grid.validate()?;
    grid.check_len(seq.len(), "sequence")?;
    let (hw, d) = (grid.grid_h * grid.grid_w, grid.hidden);
    let tokens = &seq[grid.has_cls as usize * d..];
    let mut data = vec![0f32; hw * d];
    for k in 0..hw {
        for c in 0..d {
            data[c * hw + k] = tokens[k * d + c];
        }
    }
    Ok(FeatureMap {
        hidden: d,
        grid_h: grid.grid_h,
        grid_w: grid.grid_w,
        data,
    })
}

/// Inverse of [`retile`]. `cls` must be given exactly when the grid has one.
pub fn flatten(map: &FeatureMap, cls: Option<&[f32]>) -> Result<Vec<f32>> {
    let (hw, d) = (map.grid_h * map.grid_w, map.hidden);
    if map.data.len() != hw * d {
        return Err(Error::ShapeMismatch(format!("feature map has {} values, expected {}", map.data.len(), hw * d)));
    }
    let mut out = Vec::with_capacity((hw + cls.is_some() as usize) * d);
    if let Some(cls) = cls {
        if cls.len() != d {
            return Err(Error::ShapeMismatch(format!("CLS token has {} values, expected {d}", cls.len())));
        }
        out.extend_from_slice(cls);
    }
    for k in 0..hw {
        out.extend((0..d).map(|c| map.data[c * hw + k]));
    }
    Ok(out)
}

/// Side of the token grid (or feature map) for a square input.
pub fn feature_map_size(input_px: u32, patch_px: u32) -> Result<u32> {
    if patch_px == 0 || input_px % patch_px != 0 {
        return Err(Error::NotDivisible {
            input: input_px,
            patch: patch_px,
        });
    }
    Ok(input_px / patch_px)
}

/// Accepts `1 ≤ k ≤ depth`; `None` selects the last layer.
pub fn validate_layer_tap(k: Option<u32>, depth: u32) -> Result<u32> {
    let k = k.unwrap_or(depth);
    if k == 0 || k > depth {
        return Err(Error::OutOfRange { layer: k, depth });
    }
    Ok(k)
}

/// Positional-embedding table, `rows × hidden` row-major, CLS row first.
#[derive(Debug, Clone, PartialEq)]
pub struct PosEmbed {
    pub grid_h: usize,
    pub grid_w: usize,
    pub hidden: usize,
    pub has_cls: bool,
    pub table: Vec<f32>,
}

pub const PE_MAGIC: &[u8; 4] = b"PEMB";
pub const PE_VERSION: u32 = 1;

impl PosEmbed {
    pub fn new(grid_h: usize, grid_w: usize, hidden: usize, has_cls: bool, table: Vec<f32>) -> Result<Self> {
        let pe = PosEmbed {
            grid_h,
            grid_w,
            hidden,
            has_cls,
            table,
        };
        pe.grid().check_len(pe.table.len(), "positional embedding")?;
        Ok(pe)
    }

    pub fn rows(&self) -> usize {
        self.grid_h * self.grid_w + self.has_cls as usize
    }

    pub fn grid(&self) -> TokenGrid {
        TokenGrid::new(self.grid_h, self.grid_w, self.hidden, self.has_cls)
    }

    pub fn cls_row(&self) -> Option<&[f32]> {
        self.has_cls.then(|| &self.table[..self.hidden])
    }

    pub fn row(&self, r: usize) -> &[f32] {
        &self.table[r * self.hidden..(r + 1) * self.hidden]
    }

    /// Layout: magic `PEMB`, then little-endian u32 version, rows, hidden,
    /// has_cls, grid_h, grid_w, then `rows × hidden` little-endian f32.
    pub fn write_to(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(PE_MAGIC)?;
        for v in [
            PE_VERSION,
            self.rows() as u32,
            self.hidden as u32,
            self.has_cls as u32,
            self.grid_h as u32,
            self.grid_w as u32,
        ] {
            w.write_all(&v.to_le_bytes())?;
        }
        for v in &self.table {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: String| Error::Decode(format!("positional embedding: {m}"));
        let mut head = [0u8; 28];
        r.read_exact(&mut head).map_err(|e| bad(e.to_string()))?;
        if &head[..4] != PE_MAGIC {
            return Err(bad("bad magic".into()));
        }
        let f: Vec<u32> = head[4..].chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect();
        let (version, rows, hidden, has_cls, gh, gw) = (f[0], f[1] as usize, f[2] as usize, f[3], f[4] as usize, f[5] as usize);
        if version != PE_VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        if has_cls > 1 || rows != gh * gw + has_cls as usize {
            return Err(bad(format!("{rows} rows inconsistent with {gh}x{gw} grid")));
        }
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes).map_err(|e| bad(e.to_string()))?;
        if bytes.len() != rows * hidden * 4 {
            return Err(bad(format!("payload is {} bytes, expected {}", bytes.len(), rows * hidden * 4)));
        }
        let table = bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        PosEmbed::new(gh, gw, hidden, has_cls == 1, table)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("write to vec");
        std::fs::write(path, buf).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        PosEmbed::read_from(std::io::BufReader::new(f))
    }
}

/// Bicubic resize of the grid rows, one plane per channel. The CLS row is
/// copied through.
pub fn resize_pos_embed(pe: &PosEmbed, new_h: usize, new_w: usize) -> Result<PosEmbed> {
    pe.grid().check_len(pe.table.len(), "positional embedding")?;
    if new_h == 0 || new_w == 0 {
        return Err(Error::ShapeMismatch("target grid must be non-empty".into()));
    }
    let d = pe.hidden;
    let grid_rows = &pe.table[pe.has_cls as usize * d..];
    let src = Raster::from_vec(pe.grid_w as u32, pe.grid_h as u32, 1, vec![0f32; pe.grid_h * pe.grid_w])?;
    let mut out = vec![0f32; (new_h * new_w + pe.has_cls as usize) * d];
    if let Some(cls) = pe.cls_row() {
        out[..d].copy_from_slice(cls);
    }
    let body = &mut out[pe.has_cls as usize * d..];
    let mut plane = src;
    for c in 0..d {
        for (k, v) in plane.data_mut().iter_mut().enumerate() {
            *v = grid_rows[k * d + c];
        }
        let resized = resample_bicubic(&plane, new_w as u32, new_h as u32, None);
        for (k, v) in resized.data().iter().enumerate() {
            body[k * d + c] = *v;
        }
    }
    PosEmbed::new(new_h, new_w, d, pe.has_cls, out)
}

pub fn zero_pos_embed(pe: &PosEmbed) -> PosEmbed {
    PosEmbed {
        table: vec![0.0; pe.table.len()],
        ..pe.clone()
    }
}

/// Peak rate of the linear scaling rule.
pub fn peak_lr(base_lr: f64, batch_size: u32) -> f64 {
    base_lr * batch_size as f64 / 256.0
}

/// Linear warmup from 0 to the peak, then cosine decay to 0.
pub fn lr_at(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64, batch_size: u32) -> Result<f64> {
    if warmup_steps >= total_steps {
        return Err(Error::InvalidSchedule(format!("warmup {warmup_steps} must be shorter than total {total_steps}")));
    }
    if step > total_steps {
        return Err(Error::InvalidSchedule(format!("step {step} beyond total {total_steps}")));
    }
    let peak = peak_lr(base_lr, batch_size);
    if step < warmup_steps {
        return Ok(peak * step as f64 / warmup_steps as f64);
    }
    let t = (step - warmup_steps) as f64 / (total_steps - warmup_steps) as f64;
    Ok((peak * 0.5 * (1.0 + (PI * t).cos())).max(0.0))
}
