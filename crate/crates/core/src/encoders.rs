//! Convolutional feature extractors for both views plus the descriptor
//! projectors.
//!
//! The ground branch pads circularly along the width so that encoded features
//! are translationally equivariant for panoramas: shifting the input by one
//! whole stride shifts the feature map by one column. Ground descriptors are
//! built per level by a 1x1 channel reduction, a shared per-column squeeze of
//! the height axis, and a reshape into one vector whose blocks correspond to
//! viewing directions. Aerial descriptors come from a shared fully connected
//! projector applied to spatial sub-volumes of the encoded aerial feature.

use std::sync::Arc;

use crate::tensor::graph::{Graph, NodeId, PadMode};
use crate::tensor::{Result, TensorError};

/// One backbone stage: a 3x3 convolution (stride 1 or 2) followed by relu.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Stage {
    pub channels: usize,
    pub stride: usize,
}

/// Per-branch feature extractor configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneConfig {
    pub stages: Vec<Stage>,
    pub pad: PadMode,
}

impl BackboneConfig {
    pub fn total_stride(&self) -> usize {
        self.stages.iter().map(|s| s.stride).product()
    }
}

/// All stage outputs (after relu), shallow to deep.
pub fn build_backbone(
    g: &mut Graph,
    prefix: &str,
    input: NodeId,
    cfg: &BackboneConfig,
) -> Result<Vec<NodeId>> {
    let in_shape = g.shape_of(input).to_vec();
    if in_shape.len() != 3 {
        return Err(TensorError::Shape(format!(
            "backbone input must be [h,w,c], got {in_shape:?}"
        )));
    }
    let (mut h, mut w) = (in_shape[0], in_shape[1]);
    let mut channels = in_shape[2];
    let mut x = input;
    let mut outputs = Vec::with_capacity(cfg.stages.len());
    for (i, stage) in cfg.stages.iter().enumerate() {
        if h < 3 || w < 3 {
            return Err(TensorError::Shape(format!(
                "{prefix}: stage {i} input {h}x{w} is below the receptive-field minimum"
            )));
        }
        if stage.stride == 2 && (h % 2 != 0 || w % 2 != 0) {
            return Err(TensorError::Shape(format!(
                "{prefix}: stage {i} cannot halve odd extents {h}x{w}"
            )));
        }
        let kernel = g.param(
            &format!("{prefix}.stage{i}.w"),
            &[3, 3, channels, stage.channels],
        )?;
        let bias = g.param(&format!("{prefix}.stage{i}.b"), &[stage.channels])?;
        let conv = g.conv2d(x, kernel, Some(bias), cfg.pad, stage.stride)?;
        x = g.relu(conv)?;
        outputs.push(x);
        h /= stage.stride;
        w /= stage.stride;
        channels = stage.channels;
    }
    Ok(outputs)
}

/// Length of the level-`k` ground descriptor for an encoded width `w_enc`.
pub fn descriptor_len(w_enc: usize, c_prime_k: usize) -> usize {
    w_enc * c_prime_k
}

/// Builds the level-`k` ground projector: 1x1 conv to `c_prime_k` channels, a
/// shared per-column dense squeeze of the height axis, then a reshape into a
/// single `[w_enc * c_prime_k]` descriptor whose block `b` depends only on
/// feature column `b`. Projectors carry no biases so a zero feature maps to a
/// zero descriptor.
pub fn build_ground_projector(
    g: &mut Graph,
    prefix: &str,
    feature: NodeId,
    c_prime_k: usize,
) -> Result<NodeId> {
    let fs = g.shape_of(feature).to_vec();
    if fs.len() != 3 {
        return Err(TensorError::Shape(format!(
            "ground projector input must be [h,w,c], got {fs:?}"
        )));
    }
    let (h_enc, w_enc, c_feat) = (fs[0], fs[1], fs[2]);
    let reduce = g.param(&format!("{prefix}.reduce"), &[1, 1, c_feat, c_prime_k])?;
    let reduced = g.conv2d(feature, reduce, None, PadMode::Zero, 1)?;
    // Regroup [h, w, c] into one row per column: row b lists (h, c) pairs.
    let mut index = Vec::with_capacity(h_enc * w_enc * c_prime_k);
    for b in 0..w_enc {
        for y in 0..h_enc {
            for c in 0..c_prime_k {
                index.push(((y * w_enc + b) * c_prime_k + c) as u32);
            }
        }
    }
    let columns = g.gather(reduced, Arc::new(index), &[w_enc, h_enc * c_prime_k])?;
    let squeeze = g.param(
        &format!("{prefix}.squeeze"),
        &[h_enc * c_prime_k, c_prime_k],
    )?;
    let squeezed = g.dense(columns, squeeze, None)?;
    g.reshape(squeezed, &[w_enc * c_prime_k])
}

/// Splits the encoded aerial feature into `n1 x n1` sub-volumes and projects
/// each through one shared bias-free dense layer into a descriptor of length
/// `out_len`, producing the level-1 aerial descriptor map `[n1, n1, out_len]`.
pub fn build_aerial_projector(
    g: &mut Graph,
    prefix: &str,
    feature: NodeId,
    n1: usize,
    out_len: usize,
) -> Result<NodeId> {
    let fs = g.shape_of(feature).to_vec();
    if fs.len() != 3 || fs[0] != fs[1] {
        return Err(TensorError::Shape(format!(
            "aerial projector input must be square [l,l,c], got {fs:?}"
        )));
    }
    let (l_enc, c_feat) = (fs[0], fs[2]);
    if l_enc % n1 != 0 {
        return Err(TensorError::Shape(format!(
            "encoded aerial extent {l_enc} is not divisible into {n1}x{n1} sub-volumes"
        )));
    }
    let sub = l_enc / n1;
    let sub_len = sub * sub * c_feat;
    let mut index = Vec::with_capacity(n1 * n1 * sub_len);
    for ci in 0..n1 {
        for cj in 0..n1 {
            for sy in 0..sub {
                for sx in 0..sub {
                    for c in 0..c_feat {
                        let src = ((ci * sub + sy) * l_enc + (cj * sub + sx)) * c_feat + c;
                        index.push(src as u32);
                    }
                }
            }
        }
    }
    let rows = g.gather(feature, Arc::new(index), &[n1 * n1, sub_len])?;
    let proj = g.param(&format!("{prefix}.proj"), &[sub_len, out_len])?;
    let projected = g.dense(rows, proj, None)?;
    g.reshape(projected, &[n1, n1, out_len])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::tensor::graph::{ParamSet, Workspace};
    use crate::tensor::Tensor;

    fn randn_params(g: &Graph, seed: u64) -> ParamSet<f32> {
        let mut set = ParamSet::zeros_like(g);
        for (decl, t) in g.params().iter().zip(set.tensors.iter_mut()) {
            let mut r = rng::stream(seed, &decl.name, 0);
            for v in t.data_mut() {
                *v = rng::randn(&mut r) as f32 * 0.2;
            }
        }
        set
    }

    fn randn_input(shape: &[usize], seed: u64) -> Tensor<f32> {
        let mut r = rng::stream(seed, "input", 0);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng::randn(&mut r) as f32).collect()).unwrap()
    }

    fn ground_cfg() -> BackboneConfig {
        BackboneConfig {
            stages: vec![
                Stage { channels: 8, stride: 1 },
                Stage { channels: 12, stride: 2 },
                Stage { channels: 16, stride: 2 },
            ],
            pad: PadMode::CircularHorizontal,
        }
    }

    /// Shifting a panorama by one total stride shifts the encoding by one column.
    #[test]
    fn circular_encoder_is_shift_equivariant() {
        let cfg = ground_cfg();
        let stride = cfg.total_stride();
        let mut g = Graph::new();
        let input = g.input(&[8, 32, 3]).unwrap();
        let feats = build_backbone(&mut g, "enc", input, &cfg).unwrap();
        let out = *feats.last().unwrap();
        let params = randn_params(&g, 1);

        let img = randn_input(&[8, 32, 3], 2);
        let shifted = crate::geometry::shift_panorama(&img, stride as f64 * 360.0 / 32.0).unwrap();

        let mut ws = Workspace::new(&g);
        ws.set_input(&g, input, img).unwrap();
        g.forward(&mut ws, &params, &[out]).unwrap();
        let base = ws.value(out).unwrap().clone();

        ws.set_input(&g, input, shifted).unwrap();
        g.forward(&mut ws, &params, &[out]).unwrap();
        let moved = ws.value(out).unwrap().clone();

        let (h, w, c) = (base.shape()[0], base.shape()[1], base.shape()[2]);
        let mut worst = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    let a = moved.at3(y, x, ch) as f64;
                    let b = base.at3(y, (x + 1) % w, ch) as f64;
                    worst = worst.max((a - b).abs());
                }
            }
        }
        assert!(worst < 1e-5, "equivariance deviation {worst}");
    }

    #[test]
    fn constant_input_gives_constant_columns() {
        let cfg = ground_cfg();
        let mut g = Graph::new();
        let input = g.input(&[8, 32, 3]).unwrap();
        let feats = build_backbone(&mut g, "enc", input, &cfg).unwrap();
        let out = *feats.last().unwrap();
        let params = randn_params(&g, 3);
        let mut ws = Workspace::new(&g);
        ws.set_input(&g, input, Tensor::filled(&[8, 32, 3], 0.5)).unwrap();
        g.forward(&mut ws, &params, &[out]).unwrap();
        let f = ws.value(out).unwrap();
        let (h, w, c) = (f.shape()[0], f.shape()[1], f.shape()[2]);
        for y in 0..h {
            for ch in 0..c {
                let first = f.at3(y, 0, ch);
                for x in 1..w {
                    assert!((f.at3(y, x, ch) - first).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn cropped_input_halves_encoded_width() {
        let cfg = ground_cfg();
        let mut g = Graph::new();
        let input = g.input(&[8, 16, 3]).unwrap(); // half of the 32-wide panorama
        let feats = build_backbone(&mut g, "enc", input, &cfg).unwrap();
        assert_eq!(g.shape_of(*feats.last().unwrap()), &[2, 4, 16]);
    }

    #[test]
    fn backbone_rejects_too_small_input() {
        let cfg = ground_cfg();
        let mut g = Graph::new();
        let input = g.input(&[2, 32, 3]).unwrap();
        assert!(build_backbone(&mut g, "enc", input, &cfg).is_err());
    }

    #[test]
    fn ground_descriptor_length_and_zero_property() {
        let mut g = Graph::new();
        let feat = g.input(&[4, 16, 24]).unwrap();
        let desc = build_ground_projector(&mut g, "proj", feat, 8).unwrap();
        assert_eq!(g.shape_of(desc), &[128]); // 16 columns x 8 channels
        let params = randn_params(&g, 4);
        let mut ws = Workspace::new(&g);
        ws.set_input(&g, feat, Tensor::zeros(&[4, 16, 24])).unwrap();
        g.forward(&mut ws, &params, &[desc]).unwrap();
        assert!(ws.value(desc).unwrap().data().iter().all(|&v| v == 0.0));
    }

    /// Cyclically permuting feature columns permutes descriptor blocks.
    #[test]
    fn projector_is_block_equivariant() {
        let mut g = Graph::new();
        let feat = g.input(&[4, 8, 6]).unwrap();
        let c_k = 4;
        let desc = build_ground_projector(&mut g, "proj", feat, c_k).unwrap();
        let params = randn_params(&g, 5);
        let base_in = randn_input(&[4, 8, 6], 6);
        // Shift columns left by one: out column b = in column b+1.
        let mut shifted_in = Tensor::zeros(&[4, 8, 6]);
        for y in 0..4 {
            for x in 0..8 {
                for c in 0..6 {
                    let v = base_in.at3(y, (x + 1) % 8, c);
                    let idx = shifted_in.idx3(y, x, c);
                    shifted_in.data_mut()[idx] = v;
                }
            }
        }
        let mut ws = Workspace::new(&g);
        ws.set_input(&g, feat, base_in).unwrap();
        g.forward(&mut ws, &params, &[desc]).unwrap();
        let base = ws.value(desc).unwrap().clone();
        ws.set_input(&g, feat, shifted_in).unwrap();
        g.forward(&mut ws, &params, &[desc]).unwrap();
        let moved = ws.value(desc).unwrap().clone();
        for b in 0..8 {
            for c in 0..c_k {
                let a = moved.data()[b * c_k + c];
                let e = base.data()[((b + 1) % 8) * c_k + c];
                assert!((a - e).abs() < 1e-6, "block {b} channel {c}");
            }
        }
    }

    #[test]
    fn aerial_projector_shares_weights_across_cells() {
        let mut g = Graph::new();
        let feat = g.input(&[8, 8, 3]).unwrap();
        let desc = build_aerial_projector(&mut g, "aproj", feat, 4, 10).unwrap();
        assert_eq!(g.shape_of(desc), &[4, 4, 10]);
        let params = randn_params(&g, 7);
        // Two identical sub-volumes produce identical descriptors.
        let mut img = randn_input(&[8, 8, 3], 8);
        for sy in 0..2 {
            for sx in 0..2 {
                for c in 0..3 {
                    let v = img.at3(sy, sx, c);
                    let idx = img.idx3(4 + sy, 6 + sx, c);
                    img.data_mut()[idx] = v;
                }
            }
        }
        let mut ws = Workspace::new(&g);
        ws.set_input(&g, feat, img).unwrap();
        g.forward(&mut ws, &params, &[desc]).unwrap();
        let d = ws.value(desc).unwrap();
        for c in 0..10 {
            assert!((d.at3(0, 0, c) - d.at3(2, 3, c)).abs() < 1e-6);
        }
    }

    /// The projector equals applying the dense layer per cell independently.
    #[test]
    fn aerial_projector_matches_per_cell_oracle() {
        let mut g = Graph::new();
        let feat = g.input(&[4, 4, 2]).unwrap();
        let desc = build_aerial_projector(&mut g, "aproj", feat, 2, 3).unwrap();
        let params = randn_params(&g, 9);
        let img = randn_input(&[4, 4, 2], 10);
        let mut ws = Workspace::new(&g);
        ws.set_input(&g, feat, img.clone()).unwrap();
        g.forward(&mut ws, &params, &[desc]).unwrap();
        let d = ws.value(desc).unwrap();
        let w = &params.tensors[0]; // [sub_len=8, 3]
        for ci in 0..2 {
            for cj in 0..2 {
                // Gather the sub-volume in (sy, sx, c) order.
                let mut sub = Vec::new();
                for sy in 0..2 {
                    for sx in 0..2 {
                        for c in 0..2 {
                            sub.push(img.at3(ci * 2 + sy, cj * 2 + sx, c));
                        }
                    }
                }
                for o in 0..3 {
                    let mut acc = 0.0f32;
                    for (i, &v) in sub.iter().enumerate() {
                        acc += v * w.data()[i * 3 + o];
                    }
                    assert!((d.at3(ci, cj, o) - acc).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn aerial_projector_rejects_indivisible_grid() {
        let mut g = Graph::new();
        let feat = g.input(&[9, 9, 3]).unwrap();
        assert!(build_aerial_projector(&mut g, "aproj", feat, 4, 10).is_err());
    }
}
