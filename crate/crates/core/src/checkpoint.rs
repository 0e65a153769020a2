//! Binary checkpoints for both backbones.
//!
//! Layout, all little-endian:
//!
//! ```text
//! "ESUP"  version:u16  layer_count:u16
//! [grid header, version 2 only: nx:u32 ny:u32 nz:u32 half_extent:f32]
//! layer_count x block
//! [optional optimizer state: step:u64, then layer_count x block of first
//!  moments, then layer_count x block of second moments]
//! ```
//!
//! A block is `rows:u32 cols:u32`, `rows*cols` row-major f32 weights and, for
//! MLP checkpoints (version 1), `rows` f32 biases. Grid blocks (version 2)
//! carry no biases: one block of `voxels x 1` densities and one of
//! `voxels x 3` colors.

use crate::adam::{AdamConfig, AdamState};
use crate::error::{Error, Result};
use crate::inr::SineMlp;

pub const MAGIC: &[u8; 4] = b"ESUP";
pub const VERSION_MLP: u16 = 1;
pub const VERSION_GRID: u16 = 2;

struct Writer(Vec<u8>);

impl Writer {
    fn u16(&mut self, v: u16) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f32s(&mut self, vs: impl IntoIterator<Item = f32>) {
        for v in vs {
            self.0.extend_from_slice(&v.to_le_bytes());
        }
    }
    fn block(&mut self, rows: usize, cols: usize, weights: &[f32], bias: Option<&[f32]>) {
        self.u32(rows);
        self.u32(cols);
        self.f32s(weights.iter().copied());
        if let Some(b) = bias {
            self.f32s(b.iter().copied());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
    fn f32s(&mut self, n: usize) -> Result<Vec<f32>> {
        let raw = self.take(
            n.checked_mul(4)
                .ok_or_else(|| Error::Format("block too large".into()))?,
        )?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect())
    }
    /// Returns `(rows, cols, weights, biases)`.
    fn block(&mut self, with_bias: bool) -> Result<(usize, usize, Vec<f32>, Vec<f32>)> {
        let rows = self.u32()?;
        let cols = self.u32()?;
        let w = self.f32s(
            rows.checked_mul(cols)
                .ok_or_else(|| Error::Format("block too large".into()))?,
        )?;
        let b = if with_bias {
            self.f32s(rows)?
        } else {
            Vec::new()
        };
        Ok((rows, cols, w, b))
    }
    fn done(&self) -> bool {
        self.pos == self.bytes.len()
    }
}

fn header(r: &mut Reader<'_>, expect_version: u16) -> Result<usize> {
    if r.take(4)? != MAGIC {
        return Err(Error::Format("not a checkpoint (bad magic)".into()));
    }
    let version = r.u16()?;
    if version != expect_version {
        return Err(Error::Format(format!(
            "checkpoint version {version}, expected {expect_version}"
        )));
    }
    Ok(r.u16()? as usize)
}

pub fn encode_mlp(net: &SineMlp<f32>, adam: Option<&AdamState<f32>>) -> Vec<u8> {
    let mut w = Writer(Vec::with_capacity(
        4 * net.parameter_count() * if adam.is_some() { 3 } else { 1 } + 64,
    ));
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION_MLP);
    w.u16(net.layers.len() as u16);
    for l in &net.layers {
        w.block(
            l.outputs(),
            l.inputs(),
            l.weight.as_slice().expect("standard layout"),
            Some(l.bias.as_slice().expect("standard layout")),
        );
    }
    if let Some(state) = adam {
        w.u64(state.step);
        for moments in [&state.m, &state.v] {
            for (i, l) in net.layers.iter().enumerate() {
                w.block(
                    l.outputs(),
                    l.inputs(),
                    &moments[2 * i],
                    Some(&moments[2 * i + 1]),
                );
            }
        }
    }
    w.0
}

/// Inverse of [`encode_mlp`]. The frequency scale and optimizer
/// hyper-parameters are not stored and must be supplied.
pub fn decode_mlp(
    bytes: &[u8],
    omega0: f64,
    adam: AdamConfig,
) -> Result<(SineMlp<f32>, Option<AdamState<f32>>)> {
    let mut r = Reader { bytes, pos: 0 };
    let count = header(&mut r, VERSION_MLP)?;
    if count == 0 {
        return Err(Error::Format("checkpoint has no layers".into()));
    }
    let mut blocks = Vec::with_capacity(count);
    for _ in 0..count {
        blocks.push(r.block(true)?);
    }
    let mut dims = vec![blocks[0].1];
    for (i, b) in blocks.iter().enumerate() {
        if b.1 != dims[i] {
            return Err(Error::Format(format!(
                "layer {i} expects {} inputs, previous layer gives {}",
                b.1, dims[i]
            )));
        }
        dims.push(b.0);
    }
    let mut net = SineMlp::<f32>::zeros(&dims, omega0)?;
    for (layer, (_, _, w, b)) in net.layers.iter_mut().zip(&blocks) {
        layer
            .weight
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(w);
        layer
            .bias
            .as_slice_mut()
            .expect("standard layout")
            .copy_from_slice(b);
    }
    if r.done() {
        return Ok((net, None));
    }
    let mut state = net.adam(adam);
    state.step = r.u64()?;
    for moments in [&mut state.m, &mut state.v] {
        for i in 0..count {
            let (rows, cols, w, b) = r.block(true)?;
            if (rows, cols) != (blocks[i].0, blocks[i].1) {
                return Err(Error::Format(format!("optimizer block {i} shape mismatch")));
            }
            moments[2 * i] = w;
            moments[2 * i + 1] = b;
        }
    }
    if !r.done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((net, Some(state)))
}

/// Voxel-grid parameters as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct GridCheckpoint {
    pub resolution: [usize; 3],
    pub half_extent: f32,
    /// One raw (pre-activation) density per voxel.
    pub density: Vec<f32>,
    /// Three raw color logits per voxel.
    pub color: Vec<f32>,
    /// Optimizer step and moments, slots `[density, color]`.
    pub adam: Option<(u64, [Vec<f32>; 2], [Vec<f32>; 2])>,
}

pub fn encode_grid(g: &GridCheckpoint) -> Result<Vec<u8>> {
    let voxels: usize = g.resolution.iter().product();
    if g.density.len() != voxels || g.color.len() != 3 * voxels {
        return Err(Error::arg(
            "grid checkpoint buffers do not match the resolution",
        ));
    }
    let mut w = Writer(Vec::with_capacity(16 * voxels + 64));
    w.0.extend_from_slice(MAGIC);
    w.u16(VERSION_GRID);
    w.u16(2);
    for &n in &g.resolution {
        w.u32(n);
    }
    w.f32s([g.half_extent]);
    w.block(voxels, 1, &g.density, None);
    w.block(voxels, 3, &g.color, None);
    if let Some((step, m, v)) = &g.adam {
        w.u64(*step);
        for moments in [m, v] {
            w.block(voxels, 1, &moments[0], None);
            w.block(voxels, 3, &moments[1], None);
        }
    }
    Ok(w.0)
}

pub fn decode_grid(bytes: &[u8]) -> Result<GridCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if header(&mut r, VERSION_GRID)? != 2 {
        return Err(Error::Format("grid checkpoint must hold two blocks".into()));
    }
    let resolution = [r.u32()?, r.u32()?, r.u32()?];
    let half_extent = r.f32s(1)?[0];
    let voxels: usize = resolution.iter().product();
    let read_pair = |r: &mut Reader<'_>| -> Result<[Vec<f32>; 2]> {
        let (n1, c1, d, _) = r.block(false)?;
        let (n2, c2, c, _) = r.block(false)?;
        if (n1, c1, n2, c2) != (voxels, 1, voxels, 3) {
            return Err(Error::Format("grid block shape mismatch".into()));
        }
        Ok([d, c])
    };
    let [density, color] = read_pair(&mut r)?;
    let adam = if r.done() {
        None
    } else {
        let step = r.u64()?;
        let m = read_pair(&mut r)?;
        let v = read_pair(&mut r)?;
        Some((step, m, v))
    };
    if !r.done() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok(GridCheckpoint {
        resolution,
        half_extent,
        density,
        color,
        adam,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::inr::siren_init;
    use crate::selection::batch_rng;

    #[test]
    fn mlp_round_trip_with_and_without_optimizer() {
        let net: SineMlp<f32> = siren_init(&mut batch_rng(5, 0), &[2, 6, 6, 3], 30.0).unwrap();
        let bytes = encode_mlp(&net, None);
        assert_eq!(&bytes[..4], b"ESUP");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        assert_eq!(u16::from_le_bytes([bytes[6], bytes[7]]), 3);
        let (back, state) = decode_mlp(&bytes, 30.0, AdamConfig::default()).unwrap();
        assert_eq!(back, net);
        assert!(state.is_none());

        let mut adam = net.adam(AdamConfig::default());
        adam.step = 7;
        adam.m[3][2] = 0.25;
        adam.v[5][1] = 4.0;
        let bytes = encode_mlp(&net, Some(&adam));
        let (_, state) = decode_mlp(&bytes, 30.0, AdamConfig::default()).unwrap();
        assert_eq!(state.unwrap(), adam);
    }

    #[test]
    fn first_block_layout() {
        let mut net = SineMlp::<f32>::zeros(&[2, 1, 3], 30.0).unwrap();
        net.layers[0].weight[[0, 1]] = 1.5;
        net.layers[0].bias[0] = -2.0;
        let b = encode_mlp(&net, None);
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &2u32.to_le_bytes());
        assert_eq!(&b[20..24], &1.5f32.to_le_bytes());
        assert_eq!(&b[24..28], &(-2.0f32).to_le_bytes());
    }

    #[test]
    fn corrupt_input_rejected() {
        let net = SineMlp::<f32>::zeros(&[2, 4, 3], 30.0).unwrap();
        let bytes = encode_mlp(&net, None);
        assert!(decode_mlp(&bytes[..bytes.len() - 1], 30.0, AdamConfig::default()).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode_mlp(&bad, 30.0, AdamConfig::default()).is_err());
        assert!(decode_grid(&bytes).is_err());
    }

    #[test]
    fn grid_round_trip() {
        let g = GridCheckpoint {
            resolution: [2, 3, 1],
            half_extent: 1.5,
            density: (0..6).map(|i| i as f32).collect(),
            color: (0..18).map(|i| -(i as f32)).collect(),
            adam: Some((
                3,
                [vec![0.5; 6], vec![0.25; 18]],
                [vec![1.0; 6], vec![2.0; 18]],
            )),
        };
        assert_eq!(decode_grid(&encode_grid(&g).unwrap()).unwrap(), g);
        let plain = GridCheckpoint { adam: None, ..g };
        assert_eq!(decode_grid(&encode_grid(&plain).unwrap()).unwrap(), plain);
    }
}
