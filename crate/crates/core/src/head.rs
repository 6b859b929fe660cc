//! Materializes a [`HeadConfig`] into a trainable network over base
//! encoder outputs: conv stack, encoder stack, pooling, MLP.

use std::sync::Arc;

use rand::Rng;

use crate::encoder::EncoderWeights;
use crate::error::{Error, Result};
use crate::nn::{glorot, Dense, EncoderBlock, Graph, ParamId, ParamStore, SeqLayout, Tensor, Var};
use crate::searchspace::{validate, HeadConfig};

#[derive(Clone, Debug, PartialEq)]
struct ConvLayer {
    kernel: ParamId,
    bias: ParamId,
    /// Width-1 projection used by the skip path when channels change.
    projection: Option<ParamId>,
    skip: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadModel {
    config: HeadConfig,
    base_dim: usize,
    num_classes: usize,
    store: ParamStore,
    conv: Vec<ConvLayer>,
    encoder: Vec<EncoderBlock>,
    mlp: Vec<Dense>,
}

pub fn build_head(config: &HeadConfig, base_dim: usize, num_classes: usize, rng: &mut impl Rng) -> Result<HeadModel> {
    validate(config, base_dim)?;
    if num_classes < 2 {
        return Err(Error::precondition(
            "build_head",
            format!("need at least 2 classes, got {num_classes}"),
        ));
    }
    let mut store = ParamStore::new();
    let mut width = base_dim;

    let mut conv = Vec::new();
    if config.conv.enabled {
        let heads = config.conv.heads.unwrap_or_default() as usize;
        let k = config.conv.kernel.unwrap_or_default() as usize;
        let skip = config.conv.skip.unwrap_or_default();
        for l in 0..config.conv.layers.unwrap_or_default() as usize {
            let kernel = store.register(
                format!("conv{l}.kernel"),
                glorot(&[heads, width, k], width * k, heads * k, rng),
            );
            let bias = store.register(format!("conv{l}.bias"), Tensor::zeros(&[heads]));
            let projection = (skip && width != heads).then(|| {
                store.register(format!("conv{l}.proj"), glorot(&[heads, width, 1], width, heads, rng))
            });
            conv.push(ConvLayer {
                kernel,
                bias,
                projection,
                skip,
            });
            width = heads;
        }
    }

    let mut encoder = Vec::new();
    if config.encoder.enabled {
        let heads = config.encoder.heads.unwrap_or_default() as usize;
        for l in 0..config.encoder.layers.unwrap_or_default() {
            encoder.push(EncoderBlock::new(&mut store, &format!("enc{l}"), width, heads, rng)?);
        }
    }

    let mut mlp = Vec::new();
    let hidden = config.mlp.hidden.unwrap_or_default() as usize;
    for l in 0..config.mlp.layers as usize - 1 {
        mlp.push(Dense::new(&mut store, &format!("mlp{l}"), width, hidden, rng));
        width = hidden;
    }
    mlp.push(Dense::new(&mut store, "out", width, num_classes, rng));

    Ok(HeadModel {
        config: *config,
        base_dim,
        num_classes,
        store,
        conv,
        encoder,
        mlp,
    })
}

impl HeadModel {
    pub fn config(&self) -> &HeadConfig {
        &self.config
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn base_dim(&self) -> usize {
        self.base_dim
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn param_count(&self) -> usize {
        self.store.count()
    }

    pub fn bind(&self, g: &mut Graph) -> Vec<Var> {
        g.bind(&self.store)
    }

    /// Logits `[batch, classes]` from base outputs `[batch·len, base_dim]`.
    /// PAD rows of the input are ignored.
    pub fn forward(&self, g: &mut Graph, p: &[Var], base_out: Var, layout: &Arc<SeqLayout>) -> Result<Var> {
        let cols = g.shape(base_out).get(1).copied();
        if cols != Some(self.base_dim) {
            return Err(Error::shape(
                "head forward",
                format!("expected [rows, {}], got {:?}", self.base_dim, g.shape(base_out)),
            ));
        }
        let keep = layout.row_mask();
        let mut x = base_out;
        if !self.conv.is_empty() {
            x = g.mask_rows(x, &keep)?;
        }
        for layer in &self.conv {
            let h = g.conv1d_same(x, p[layer.kernel.index()], layout)?;
            let h = g.add_row(h, p[layer.bias.index()])?;
            let mut h = g.relu(h);
            if layer.skip {
                let s = match layer.projection {
                    Some(proj) => g.conv1d_same(x, p[proj.index()], layout)?,
                    None => x,
                };
                h = g.add(h, s)?;
            }
            x = g.mask_rows(h, &keep)?;
        }
        for block in &self.encoder {
            x = block.forward(g, p, x, layout)?;
        }
        let mut h = g.pool(x, self.config.pooling, layout)?;
        let (last, hidden) = self.mlp.split_last().expect("output layer");
        for dense in hidden {
            let z = dense.forward(g, p, h)?;
            h = g.relu(z);
        }
        last.forward(g, p, h)
    }

    /// Logits `[classes]` for one sequence's base outputs `[T, base_dim]`,
    /// all rows treated as valid.
    pub fn logits(&self, base_out: &Tensor) -> Result<Tensor> {
        let t = match base_out.shape() {
            [t, _] if *t > 0 => *t,
            s => return Err(Error::shape("head forward", format!("expected [T, E], got {s:?}"))),
        };
        let mut g = Graph::new();
        let mut frozen = self.store.clone();
        frozen.set_requires_grad(false);
        let p = g.bind(&frozen);
        let x = g.constant(base_out.shape().to_vec(), base_out.data().to_vec())?;
        let layout = Arc::new(SeqLayout::dense(1, t));
        let out = self.forward(&mut g, &p, x, &layout)?;
        Tensor::new(vec![self.num_classes], g.value(out).to_vec())
    }
}

/// Head parameters over base parameters; reported, never enforced.
pub fn budget_ratio(head: &HeadModel, base: &EncoderWeights) -> f64 {
    head.param_count() as f64 / base.param_count() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::searchspace::{baseline_config, ConvSpec, EncoderSpec, MlpSpec, PoolingKind};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(11)
    }

    #[test]
    fn baseline_is_one_linear_layer() {
        let h = build_head(&baseline_config(), 32, 2, &mut rng()).unwrap();
        assert_eq!(h.param_count(), 66);
        let x = Tensor::uniform(&[5, 32], 1.0, &mut rng());
        let logits = h.logits(&x).unwrap();
        let w = h.store().tensors()[0].data();
        let b = h.store().tensors()[1].data();
        for c in 0..2 {
            let expect: f64 = (0..32).map(|i| x.data()[i] * w[i * 2 + c]).sum::<f64>() + b[c];
            assert!((logits.data()[c] - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn deep_mlp_count() {
        let c = HeadConfig {
            mlp: MlpSpec::deep(3, 50),
            ..baseline_config()
        };
        assert_eq!(build_head(&c, 32, 2, &mut rng()).unwrap().param_count(), 4302);
    }

    #[test]
    fn skip_projection_only_on_width_change() {
        let c = HeadConfig {
            conv: ConvSpec::new(8, 3, 2, true),
            ..baseline_config()
        };
        let h = build_head(&c, 32, 2, &mut rng()).unwrap();
        assert!(h.conv[0].projection.is_some());
        assert!(h.conv[1].projection.is_none());
        let proj = h.store().get(h.conv[0].projection.unwrap());
        assert_eq!(proj.shape(), &[8, 32, 1]);
        let c32 = HeadConfig {
            conv: ConvSpec::new(32, 3, 1, true),
            ..baseline_config()
        };
        assert!(build_head(&c32, 32, 2, &mut rng()).unwrap().conv[0].projection.is_none());
    }

    #[test]
    fn reported_column_head() {
        let c = HeadConfig {
            pooling: PoolingKind::Mean,
            freeze_base: false,
            mlp: MlpSpec::deep(5, 50),
            conv: ConvSpec::disabled(),
            encoder: EncoderSpec::new(4, 1),
        };
        let h = build_head(&c, 32, 2, &mut rng()).unwrap();
        assert_eq!(h.encoder.len(), 1);
        assert_eq!(h.mlp.len(), 5);
        let block = 2 * 32 + (32 * 96 + 96) + (32 * 32 + 32) + 2 * 32 + (32 * 64 + 64) + (64 * 32 + 32);
        let mlp = (32 * 50 + 50) + 3 * (50 * 50 + 50) + (50 * 2 + 2);
        assert_eq!(h.param_count(), block + mlp);
    }

    #[test]
    fn construction_is_deterministic_and_checked() {
        let c = HeadConfig {
            conv: ConvSpec::new(12, 5, 2, true),
            encoder: EncoderSpec::new(3, 1),
            ..baseline_config()
        };
        assert_eq!(build_head(&c, 32, 3, &mut rng()).unwrap(), build_head(&c, 32, 3, &mut rng()).unwrap());
        assert!(build_head(&c, 32, 1, &mut rng()).is_err());
        let bad = HeadConfig {
            encoder: EncoderSpec::new(5, 1),
            ..baseline_config()
        };
        assert!(matches!(build_head(&bad, 32, 2, &mut rng()), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn mean_pooling_ignores_token_order() {
        let c = HeadConfig {
            pooling: PoolingKind::Mean,
            mlp: MlpSpec::deep(2, 10),
            ..baseline_config()
        };
        let h = build_head(&c, 32, 2, &mut rng()).unwrap();
        let x = Tensor::uniform(&[4, 32], 1.0, &mut rng());
        let mut swapped = x.data().to_vec();
        let (a, b) = swapped.split_at_mut(64);
        a[32..64].swap_with_slice(&mut b[..32]);
        let y = h.logits(&Tensor::new(vec![4, 32], swapped).unwrap()).unwrap();
        let l = h.logits(&x).unwrap();
        for (u, v) in l.data().iter().zip(y.data()) {
            assert!((u - v).abs() < 1e-12);
        }
    }

    #[test]
    fn conv_keeps_length_and_rejects_wrong_width() {
        let c = HeadConfig {
            pooling: PoolingKind::Max,
            conv: ConvSpec::new(6, 11, 3, false),
            ..baseline_config()
        };
        let h = build_head(&c, 32, 2, &mut rng()).unwrap();
        assert_eq!(h.logits(&Tensor::zeros(&[2, 32])).unwrap().shape(), &[2]);
        assert!(h.logits(&Tensor::zeros(&[2, 16])).is_err());
    }
}
