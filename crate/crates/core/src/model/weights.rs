//! The full parameter tree of the model, generic over the leaf type.
//!
//! `Weights<TensorId>` is the training view (leaves live on an autodiff
//! tape); `Weights<Mat>` is the inference view (leaves are plain matrices,
//! materialized once per session). Both are produced by [`walk`], which
//! visits every parameter in one fixed order with a stable dotted name, so
//! registration, tape binding, inference materialization, and checkpoint
//! layout all agree by construction.

use crate::config::ModelConfig;
use crate::mat::Mat;
use crate::model::attention::Attn;
use sicl_tensor::TensorId;

#[derive(Debug, Clone)]
pub struct Norm<T> {
    pub g: T,
    pub b: T,
}

/// Two-layer stride-2 convolutional frontend (4x time reduction).
#[derive(Debug, Clone)]
pub struct Subsample<T> {
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

/// Gated feed-forward used in the encoder: swish(x Wg) * (x Wv), then Wo.
#[derive(Debug, Clone)]
pub struct EncFf<T> {
    pub norm: Norm<T>,
    pub wg: T,
    pub wv: T,
    pub wo: T,
}

/// Encoder convolution module: pointwise expand + gate, depthwise, project.
#[derive(Debug, Clone)]
pub struct EncConv<T> {
    pub norm: Norm<T>,
    pub pw1_w: T,
    pub pw1_b: T,
    pub dw_w: T,
    pub norm2: Norm<T>,
    pub pw2_w: T,
    pub pw2_b: T,
}

#[derive(Debug, Clone)]
pub struct EncLayer<T> {
    pub ff1: EncFf<T>,
    pub attn_norm: Norm<T>,
    pub attn: Attn<T>,
    pub conv: EncConv<T>,
    pub ff2: EncFf<T>,
}

/// Plain two-layer feed-forward used in the decoder.
#[derive(Debug, Clone)]
pub struct DecFf<T> {
    pub norm: Norm<T>,
    pub w1: T,
    pub b1: T,
    pub w2: T,
    pub b2: T,
}

#[derive(Debug, Clone)]
pub struct DecLayer<T> {
    pub self_norm: Norm<T>,
    pub self_attn: Attn<T>,
    pub cross_norm: Norm<T>,
    pub cross_attn: Attn<T>,
    pub ff: DecFf<T>,
}

#[derive(Debug, Clone)]
pub struct Weights<T> {
    pub sub: Subsample<T>,
    pub enc: Vec<EncLayer<T>>,
    pub enc_final: Norm<T>,
    pub embed: T,
    pub dec: Vec<DecLayer<T>>,
    pub dec_final: Norm<T>,
    pub head_w: T,
    pub head_b: T,
    pub ctc_w: T,
    pub ctc_b: T,
}

pub type TapeWeights = Weights<TensorId>;
pub type InferWeights = Weights<Mat>;

/// Visits every parameter in the fixed canonical order, calling
/// `f(name, shape)` once per parameter and assembling the returned leaves
/// into a tree.
pub fn walk<T>(cfg: &ModelConfig, f: &mut impl FnMut(&str, &[usize]) -> T) -> Weights<T> {
    let d = cfg.model_dim;
    let ff = cfg.ff_dim;

    fn norm<T>(f: &mut impl FnMut(&str, &[usize]) -> T, prefix: &str, d: usize) -> Norm<T> {
        Norm { g: f(&format!("{prefix}.g"), &[d]), b: f(&format!("{prefix}.b"), &[d]) }
    }
    fn attn<T>(f: &mut impl FnMut(&str, &[usize]) -> T, prefix: &str, d: usize) -> Attn<T> {
        Attn {
            wq: f(&format!("{prefix}.wq"), &[d, d]),
            wk: f(&format!("{prefix}.wk"), &[d, d]),
            wv: f(&format!("{prefix}.wv"), &[d, d]),
            wo: f(&format!("{prefix}.wo"), &[d, d]),
        }
    }
    fn enc_ff<T>(f: &mut impl FnMut(&str, &[usize]) -> T, prefix: &str, d: usize, ff: usize) -> EncFf<T> {
        EncFf {
            norm: norm(f, &format!("{prefix}.norm"), d),
            wg: f(&format!("{prefix}.wg"), &[d, ff]),
            wv: f(&format!("{prefix}.wv"), &[d, ff]),
            wo: f(&format!("{prefix}.wo"), &[ff, d]),
        }
    }

    let sub = Subsample {
        w1: f("enc.sub.conv1.w", &[d, cfg.feature_dim, 3]),
        b1: f("enc.sub.conv1.b", &[d]),
        w2: f("enc.sub.conv2.w", &[d, d, 3]),
        b2: f("enc.sub.conv2.b", &[d]),
    };
    let enc = (0..cfg.enc_layers)
        .map(|i| {
            let p = format!("enc.{i}");
            EncLayer {
                ff1: enc_ff(f, &format!("{p}.ff1"), d, ff),
                attn_norm: norm(f, &format!("{p}.attn.norm"), d),
                attn: attn(f, &format!("{p}.attn"), d),
                conv: EncConv {
                    norm: norm(f, &format!("{p}.conv.norm"), d),
                    pw1_w: f(&format!("{p}.conv.pw1.w"), &[2 * d, d, 1]),
                    pw1_b: f(&format!("{p}.conv.pw1.b"), &[2 * d]),
                    dw_w: f(&format!("{p}.conv.dw.w"), &[d, cfg.conv_kernel]),
                    norm2: norm(f, &format!("{p}.conv.norm2"), d),
                    pw2_w: f(&format!("{p}.conv.pw2.w"), &[d, d, 1]),
                    pw2_b: f(&format!("{p}.conv.pw2.b"), &[d]),
                },
                ff2: enc_ff(f, &format!("{p}.ff2"), d, ff),
            }
        })
        .collect();
    let enc_final = norm(f, "enc.final_norm", d);
    let embed = f("dec.embed", &[cfg.vocab_size, d]);
    let dec = (0..cfg.dec_layers)
        .map(|i| {
            let p = format!("dec.{i}");
            DecLayer {
                self_norm: norm(f, &format!("{p}.self.norm"), d),
                self_attn: attn(f, &format!("{p}.self"), d),
                cross_norm: norm(f, &format!("{p}.cross.norm"), d),
                cross_attn: attn(f, &format!("{p}.cross"), d),
                ff: DecFf {
                    norm: norm(f, &format!("{p}.ff.norm"), d),
                    w1: f(&format!("{p}.ff.w1"), &[d, ff]),
                    b1: f(&format!("{p}.ff.b1"), &[ff]),
                    w2: f(&format!("{p}.ff.w2"), &[ff, d]),
                    b2: f(&format!("{p}.ff.b2"), &[d]),
                },
            }
        })
        .collect();
    let dec_final = norm(f, "dec.final_norm", d);
    let head_w = f("dec.head.w", &[d, cfg.vocab_size]);
    let head_b = f("dec.head.b", &[cfg.vocab_size]);
    let ctc_w = f("ctc.w", &[d, cfg.ctc_dim]);
    let ctc_b = f("ctc.b", &[cfg.ctc_dim]);

    Weights { sub, enc, enc_final, embed, dec, dec_final, head_w, head_b, ctc_w, ctc_b }
}

/// Builds the tape-side tree from leaf ids listed in walk order. Used by
/// gradient checks, which create the leaves themselves.
pub fn weights_from_ids(cfg: &ModelConfig, ids: &[TensorId]) -> TapeWeights {
    let mut next = 0usize;
    let tree = walk(cfg, &mut |_, _| {
        let id = ids[next];
        next += 1;
        id
    });
    assert_eq!(next, ids.len(), "id list does not match the parameter count");
    tree
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn walk_order_is_stable_and_names_unique() {
        let cfg = ModelConfig::desk();
        let mut names = Vec::new();
        walk(&cfg, &mut |name, shape| {
            assert!(!shape.is_empty());
            names.push(name.to_string());
        });
        let mut dedup = names.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), names.len(), "duplicate parameter name");
        assert_eq!(names[0], "enc.sub.conv1.w");
        assert_eq!(names.last().unwrap(), "ctc.b");
        assert!(names.contains(&"enc.0.conv.dw.w".to_string()));
        assert!(names.contains(&"dec.1.cross.wq".to_string()));
    }
}
