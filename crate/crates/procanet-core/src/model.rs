//! The dual-encoder segmentation network.
//!
//! Two encoders (optical bands and a second stream, typically NIR) run the
//! same double-conv + 2x2-pool ladder. After every pooling step an attention
//! block crosses the two streams; its fused output becomes the decoder skip
//! for that level, while the attended streams continue down their own
//! encoders. The deepest fused map feeds a double-conv bottleneck, then a
//! decoder of upsample + conv stages with skip concatenations, and a 1x1
//! head produces one logit channel at full resolution.
//!
//! Ablation variants come from the structure itself, not from flags:
//! without attention blocks the skip is the elementwise sum of the raw
//! pooled streams, and with a single encoder the skips are the pooled
//! features unchanged (a plain UNet).

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{proca_backward, proca_forward, ProcaParams, ProcaTrace};
use crate::autograd::{
    add_forward, concat_backward, concat_channels, conv_backward, conv_forward, maxpool_backward,
    maxpool_forward, relu_backward, relu_forward, upsample_backward, upsample_forward, ConcatCtx,
    ConvCtx, KernelGrad, PoolCtx, ReluCtx, UpsampleCtx,
};
use crate::error::{Error, Result};
use crate::kernels::ConvKernel;
use crate::scalar::Scalar;
use crate::tensor::{elementwise, ElemOp, Tensor};

fn default_levels() -> usize {
    4
}
fn default_base_channels() -> usize {
    16
}
fn default_encoder1_bands() -> Vec<String> {
    ["R", "G", "B", "NIR"].map(String::from).to_vec()
}
fn default_encoder2_bands() -> Option<Vec<String>> {
    Some(vec!["NIR".into()])
}
fn default_attention() -> bool {
    true
}
fn default_seed() -> u64 {
    42
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(default = "default_levels")]
    pub levels: usize,
    #[serde(default = "default_base_channels")]
    pub base_channels: usize,
    #[serde(default = "default_encoder1_bands")]
    pub encoder1_bands: Vec<String>,
    #[serde(default = "default_encoder2_bands")]
    pub encoder2_bands: Option<Vec<String>>,
    #[serde(default = "default_attention")]
    pub attention: bool,
    #[serde(default = "default_seed")]
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            levels: default_levels(),
            base_channels: default_base_channels(),
            encoder1_bands: default_encoder1_bands(),
            encoder2_bands: default_encoder2_bands(),
            attention: default_attention(),
            seed: default_seed(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(Error::InvalidConfig("levels must be at least 1".into()));
        }
        if self.base_channels == 0 {
            return Err(Error::InvalidConfig(
                "base_channels must be at least 1".into(),
            ));
        }
        if self.encoder1_bands.is_empty() {
            return Err(Error::InvalidConfig(
                "encoder1_bands must not be empty".into(),
            ));
        }
        if matches!(&self.encoder2_bands, Some(b) if b.is_empty()) {
            return Err(Error::InvalidConfig(
                "encoder2_bands must not be empty when present".into(),
            ));
        }
        Ok(())
    }

    /// Attention needs two streams; with a single encoder it is silently off
    /// and the model degenerates to a plain UNet.
    pub fn attention_active(&self) -> bool {
        self.attention && self.encoder2_bands.is_some()
    }

    /// Feature channels after the level-i encoder block (1-indexed).
    pub fn channels_at(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }
}

/// Two 3x3 convolutions, each followed by ReLU.
#[derive(Clone, Debug, PartialEq)]
pub struct DoubleConv<F> {
    pub conv1: ConvKernel<F>,
    pub conv2: ConvKernel<F>,
}

/// One decoder stage: nearest upsample, 3x3 conv + ReLU, then (after the
/// optional skip concat) a double conv.
#[derive(Clone, Debug, PartialEq)]
pub struct UpBlock<F> {
    pub up: ConvKernel<F>,
    pub conv1: ConvKernel<F>,
    pub conv2: ConvKernel<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProcaNet<F> {
    pub enc1: Vec<DoubleConv<F>>,
    pub enc2: Option<Vec<DoubleConv<F>>>,
    /// One block per level; present only when the model fuses with attention.
    pub proca: Option<Vec<ProcaParams<F>>>,
    pub bottleneck: DoubleConv<F>,
    pub decoder: Vec<UpBlock<F>>,
    pub head: ConvKernel<F>,
}

/// Gradients keyed by kernel name, in the same namespace as
/// [`ProcaNet::named_kernels`].
pub type GradientSet<F> = BTreeMap<String, KernelGrad<F>>;

fn init_kernel<F: Scalar>(
    rng: &mut ChaCha8Rng,
    out_ch: usize,
    in_ch: usize,
    ksize: usize,
) -> ConvKernel<F> {
    let mut k = ConvKernel::zeros(out_ch, in_ch, ksize).expect("kernel size is 1 or 3");
    // Uniform(-s, s) with s^2 = 1/fan_in keeps activation variance roughly
    // constant through the ladder; biases stay zero.
    let s = (1.0 / (in_ch * ksize * ksize) as f64).sqrt();
    crate::tensor::fill_uniform(rng, &mut k.weight, -s, s);
    k
}

fn init_double_conv<F: Scalar>(
    rng: &mut ChaCha8Rng,
    in_ch: usize,
    out_ch: usize,
) -> DoubleConv<F> {
    DoubleConv {
        conv1: init_kernel(rng, out_ch, in_ch, 3),
        conv2: init_kernel(rng, out_ch, out_ch, 3),
    }
}

fn init_encoder<F: Scalar>(
    rng: &mut ChaCha8Rng,
    cfg: &ModelConfig,
    in_ch: usize,
) -> Vec<DoubleConv<F>> {
    (1..=cfg.levels)
        .map(|lvl| {
            let prev = if lvl == 1 {
                in_ch
            } else {
                cfg.channels_at(lvl - 1)
            };
            init_double_conv(rng, prev, cfg.channels_at(lvl))
        })
        .collect()
}

impl<F: Scalar> ProcaNet<F> {
    /// Deterministic initialization: one RNG seeded from the config walks
    /// the parameters in declaration order (the manifest order).
    pub fn init(cfg: &ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc1 = init_encoder(&mut rng, cfg, cfg.encoder1_bands.len());
        let enc2 = cfg
            .encoder2_bands
            .as_ref()
            .map(|b| init_encoder(&mut rng, cfg, b.len()));
        let proca = if cfg.attention_active() {
            Some(
                (1..=cfg.levels)
                    .map(|lvl| {
                        let c = cfg.channels_at(lvl);
                        ProcaParams::new(
                            init_kernel(&mut rng, c, c, 3),
                            init_kernel(&mut rng, c, c, 3),
                            init_kernel(&mut rng, c, c, 3),
                            init_kernel(&mut rng, c, c, 3),
                        )
                    })
                    .collect::<Result<Vec<_>>>()?,
            )
        } else {
            None
        };
        let deep = cfg.channels_at(cfg.levels);
        let bottleneck = init_double_conv(&mut rng, deep, 2 * deep);
        let decoder = (1..=cfg.levels)
            .map(|stage| {
                let up_in = if stage == 1 {
                    2 * deep
                } else {
                    cfg.channels_at(cfg.levels - stage + 1)
                };
                let out = if stage < cfg.levels {
                    cfg.channels_at(cfg.levels - stage)
                } else {
                    cfg.channels_at(1)
                };
                let cat_in = if stage < cfg.levels { 2 * out } else { out };
                UpBlock {
                    up: init_kernel(&mut rng, out, up_in, 3),
                    conv1: init_kernel(&mut rng, out, cat_in, 3),
                    conv2: init_kernel(&mut rng, out, out, 3),
                }
            })
            .collect();
        let head = init_kernel(&mut rng, 1, cfg.channels_at(1), 1);
        Ok(ProcaNet {
            enc1,
            enc2,
            proca,
            bottleneck,
            decoder,
            head,
        })
    }

    pub fn levels(&self) -> usize {
        self.enc1.len()
    }

    pub fn in_channels(&self) -> usize {
        self.enc1[0].conv1.in_ch
    }

    pub fn in_channels2(&self) -> Option<usize> {
        self.enc2.as_ref().map(|e| e[0].conv1.in_ch)
    }

    pub fn attention_active(&self) -> bool {
        self.proca.is_some()
    }

    /// Every kernel with its manifest name, in fixed declaration order.
    pub fn named_kernels(&self) -> Vec<(String, &ConvKernel<F>)> {
        let mut out = Vec::new();
        for (label, enc) in [("enc1", Some(&self.enc1)), ("enc2", self.enc2.as_ref())] {
            if let Some(enc) = enc {
                for (i, dc) in enc.iter().enumerate() {
                    out.push((format!("{label}.level{}.conv1", i + 1), &dc.conv1));
                    out.push((format!("{label}.level{}.conv2", i + 1), &dc.conv2));
                }
            }
        }
        if let Some(proca) = &self.proca {
            for (i, p) in proca.iter().enumerate() {
                for (suffix, k) in p.kernels() {
                    out.push((format!("proca.level{}.{suffix}", i + 1), k));
                }
            }
        }
        out.push(("bottleneck.conv1".into(), &self.bottleneck.conv1));
        out.push(("bottleneck.conv2".into(), &self.bottleneck.conv2));
        for (j, ub) in self.decoder.iter().enumerate() {
            out.push((format!("decoder.stage{}.up", j + 1), &ub.up));
            out.push((format!("decoder.stage{}.conv1", j + 1), &ub.conv1));
            out.push((format!("decoder.stage{}.conv2", j + 1), &ub.conv2));
        }
        out.push(("head".into(), &self.head));
        out
    }

    pub fn named_kernels_mut(&mut self) -> Vec<(String, &mut ConvKernel<F>)> {
        let mut out: Vec<(String, &mut ConvKernel<F>)> = Vec::new();
        for (label, enc) in [
            ("enc1", Some(&mut self.enc1)),
            ("enc2", self.enc2.as_mut()),
        ] {
            if let Some(enc) = enc {
                for (i, dc) in enc.iter_mut().enumerate() {
                    out.push((format!("{label}.level{}.conv1", i + 1), &mut dc.conv1));
                    out.push((format!("{label}.level{}.conv2", i + 1), &mut dc.conv2));
                }
            }
        }
        if let Some(proca) = &mut self.proca {
            for (i, p) in proca.iter_mut().enumerate() {
                out.push((format!("proca.level{}.self_r", i + 1), &mut p.w_self_r));
                out.push((format!("proca.level{}.self_n", i + 1), &mut p.w_self_n));
                out.push((
                    format!("proca.level{}.cross_r_to_n", i + 1),
                    &mut p.w_cross_r_to_n,
                ));
                out.push((
                    format!("proca.level{}.cross_n_to_r", i + 1),
                    &mut p.w_cross_n_to_r,
                ));
            }
        }
        out.push(("bottleneck.conv1".into(), &mut self.bottleneck.conv1));
        out.push(("bottleneck.conv2".into(), &mut self.bottleneck.conv2));
        for (j, ub) in self.decoder.iter_mut().enumerate() {
            out.push((format!("decoder.stage{}.up", j + 1), &mut ub.up));
            out.push((format!("decoder.stage{}.conv1", j + 1), &mut ub.conv1));
            out.push((format!("decoder.stage{}.conv2", j + 1), &mut ub.conv2));
        }
        out.push(("head".into(), &mut self.head));
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_kernels().iter().map(|(_, k)| k.param_count()).sum()
    }

    fn check_inputs(&self, x1: &Tensor<F>, x2: Option<&Tensor<F>>) -> Result<()> {
        if x1.c() != self.in_channels() {
            return Err(Error::ChannelMismatch {
                op: "forward: encoder 1 input",
                expected: self.in_channels(),
                got: x1.c(),
            });
        }
        match (self.in_channels2(), x2) {
            (Some(expect), Some(x2)) => {
                if x2.c() != expect {
                    return Err(Error::ChannelMismatch {
                        op: "forward: encoder 2 input",
                        expected: expect,
                        got: x2.c(),
                    });
                }
                if x1.n() != x2.n() || x1.h() != x2.h() || x1.w() != x2.w() {
                    return Err(Error::ShapeMismatch {
                        op: "forward: encoder inputs",
                        left: format!("{:?}", x1.shape()),
                        right: format!("{:?}", x2.shape()),
                    });
                }
            }
            (None, None) => {}
            (Some(_), None) => {
                return Err(Error::InvalidConfig(
                    "forward: model has a second encoder but no second input was given".into(),
                ))
            }
            (None, Some(_)) => {
                return Err(Error::InvalidConfig(
                    "forward: model has one encoder but a second input was given".into(),
                ))
            }
        }
        let div = 1usize << self.levels();
        if x1.h() % div != 0 || x1.w() % div != 0 {
            return Err(Error::InvalidConfig(format!(
                "forward: spatial dims {}x{} must be divisible by 2^levels = {div}",
                x1.h(),
                x1.w()
            )));
        }
        Ok(())
    }

    pub fn forward(&self, x1: &Tensor<F>, x2: Option<&Tensor<F>>) -> Result<Tensor<F>> {
        Ok(self.forward_traced(x1, x2)?.0)
    }

    /// Forward pass keeping every layer context for [`ProcaNet::backward`].
    pub fn forward_traced(
        &self,
        x1: &Tensor<F>,
        x2: Option<&Tensor<F>>,
    ) -> Result<(Tensor<F>, Trace<F>)> {
        self.check_inputs(x1, x2)?;
        let levels = self.levels();
        let mut level_traces = Vec::with_capacity(levels);
        let mut skips: Vec<Tensor<F>> = Vec::with_capacity(levels);

        let mut cur_r = x1.clone();
        let mut cur_n = x2.cloned();
        for lvl in 0..levels {
            let (feat_r, enc_r) =
                double_conv_forward(&cur_r, &self.enc1[lvl].conv1, &self.enc1[lvl].conv2)?;
            let (pool_r, pool_ctx_r) = maxpool_forward(&feat_r)?;

            let enc_n = match (&self.enc2, &cur_n) {
                (Some(enc2), Some(xn)) => {
                    let (feat_n, tr) =
                        double_conv_forward(xn, &enc2[lvl].conv1, &enc2[lvl].conv2)?;
                    let (pool_n, ctx) = maxpool_forward(&feat_n)?;
                    Some((tr, ctx, pool_n))
                }
                _ => None,
            };

            let fusion;
            match (&self.proca, &enc_n) {
                (Some(proca), Some((_, _, pool_n))) => {
                    let tr = proca_forward(&pool_r, pool_n, &proca[lvl])?;
                    skips.push(tr.fused.clone());
                    cur_r = tr.x_tilde_r.clone();
                    cur_n = Some(tr.x_tilde_n.clone());
                    fusion = FusionTrace::Proca(Box::new(tr));
                }
                (None, Some((_, _, pool_n))) => {
                    skips.push(add_forward(&pool_r, pool_n)?);
                    cur_r = pool_r;
                    cur_n = Some(pool_n.clone());
                    fusion = FusionTrace::Add;
                }
                (_, None) => {
                    skips.push(pool_r.clone());
                    cur_r = pool_r;
                    cur_n = None;
                    fusion = FusionTrace::Single;
                }
            }
            level_traces.push(LevelTrace {
                enc_r,
                pool_r: pool_ctx_r,
                enc_n: enc_n.map(|(tr, ctx, _)| (tr, ctx)),
                fusion,
            });
        }

        let deepest = skips.pop().expect("levels >= 1");
        let (mut feat, bottleneck) =
            double_conv_forward(&deepest, &self.bottleneck.conv1, &self.bottleneck.conv2)?;

        let mut up_traces = Vec::with_capacity(levels);
        for (stage, ub) in self.decoder.iter().enumerate() {
            let (bigger, up_ctx) = upsample_forward(&feat);
            let (pre, upc) = conv_forward(&bigger, &ub.up)?;
            let (act, upr) = relu_forward(&pre);
            let (merged, cat) = match skips.pop() {
                Some(skip) => {
                    let (m, ctx) = concat_channels(&act, &skip)?;
                    (m, Some(ctx))
                }
                None => {
                    debug_assert_eq!(stage + 1, levels);
                    (act, None)
                }
            };
            let (out, dc) = double_conv_forward(&merged, &ub.conv1, &ub.conv2)?;
            feat = out;
            up_traces.push(UpTrace {
                up: up_ctx,
                upc,
                upr,
                cat,
                dc,
            });
        }

        let (logits, head) = conv_forward(&feat, &self.head)?;
        Ok((
            logits,
            Trace {
                levels: level_traces,
                bottleneck,
                decoder: up_traces,
                head,
            },
        ))
    }

    /// Backward pass over a trace. Returns one gradient per kernel, keyed
    /// exactly like [`ProcaNet::named_kernels`]. Input gradients are
    /// computed internally but not returned — inputs are data, not
    /// parameters.
    pub fn backward(&self, trace: &Trace<F>, d_logits: &Tensor<F>) -> Result<GradientSet<F>> {
        let levels = self.levels();
        let mut grads = GradientSet::new();

        let (mut d_feat, g_head) = conv_backward(&self.head, &trace.head, d_logits)?;
        grads.insert("head".into(), g_head);

        // Decoder stages in reverse; collect per-level skip gradients.
        let mut d_skips: Vec<Option<Tensor<F>>> = vec![None; levels];
        for (stage, (ub, tr)) in self.decoder.iter().zip(&trace.decoder).enumerate().rev() {
            let (d_merged, g1, g2) =
                double_conv_backward(&ub.conv1, &ub.conv2, &tr.dc, &d_feat)?;
            grads.insert(format!("decoder.stage{}.conv1", stage + 1), g1);
            grads.insert(format!("decoder.stage{}.conv2", stage + 1), g2);
            let d_act = match &tr.cat {
                Some(ctx) => {
                    let (d_act, d_skip) = concat_backward(ctx, &d_merged)?;
                    // Stage j consumes the skip from level (levels - j), or
                    // index levels - stage - 2 with zero-based stage.
                    d_skips[levels - stage - 2] = Some(d_skip);
                    d_act
                }
                None => d_merged,
            };
            let d_pre = relu_backward(&tr.upr, &d_act)?;
            let (d_bigger, g_up) = conv_backward(&ub.up, &tr.upc, &d_pre)?;
            grads.insert(format!("decoder.stage{}.up", stage + 1), g_up);
            d_feat = upsample_backward(&tr.up, &d_bigger)?;
        }

        let (d_deepest, g1, g2) = double_conv_backward(
            &self.bottleneck.conv1,
            &self.bottleneck.conv2,
            &trace.bottleneck,
            &d_feat,
        )?;
        grads.insert("bottleneck.conv1".into(), g1);
        grads.insert("bottleneck.conv2".into(), g2);
        d_skips[levels - 1] = Some(d_deepest);

        // Encoder levels in reverse. d_cont_* carry gradients flowing from
        // level i+1 back into the features that continued down each stream.
        let mut d_cont_r: Option<Tensor<F>> = None;
        let mut d_cont_n: Option<Tensor<F>> = None;
        for (lvl, tr) in trace.levels.iter().enumerate().rev() {
            let d_fused = d_skips[lvl].take();
            let (d_pool_r, d_pool_n) = match (&self.proca, &tr.fusion) {
                (Some(proca), FusionTrace::Proca(ptr)) => {
                    let (d_r, d_n, pg) = proca_backward(
                        &proca[lvl],
                        ptr,
                        d_fused.as_ref(),
                        d_cont_r.as_ref(),
                        d_cont_n.as_ref(),
                    )?;
                    grads.insert(format!("proca.level{}.self_r", lvl + 1), pg.self_r);
                    grads.insert(format!("proca.level{}.self_n", lvl + 1), pg.self_n);
                    grads.insert(
                        format!("proca.level{}.cross_r_to_n", lvl + 1),
                        pg.cross_r_to_n,
                    );
                    grads.insert(
                        format!("proca.level{}.cross_n_to_r", lvl + 1),
                        pg.cross_n_to_r,
                    );
                    (d_r, Some(d_n))
                }
                (None, FusionTrace::Add) => {
                    // The raw pooled features feed both the sum-skip and the
                    // next level, so both gradients accumulate.
                    let shape = tr.pool_shape();
                    (
                        sum_grads(shape, &[d_fused.as_ref(), d_cont_r.as_ref()])?,
                        Some(sum_grads(shape, &[d_fused.as_ref(), d_cont_n.as_ref()])?),
                    )
                }
                (None, FusionTrace::Single) => {
                    let shape = tr.pool_shape();
                    (
                        sum_grads(shape, &[d_fused.as_ref(), d_cont_r.as_ref()])?,
                        None,
                    )
                }
                _ => {
                    return Err(Error::GradientMismatch {
                        name: format!("level{}", lvl + 1),
                        detail: "trace fusion kind disagrees with model structure".into(),
                    })
                }
            };

            let d_feat_r = maxpool_backward(&tr.pool_r, &d_pool_r)?;
            let (d_in_r, g1, g2) = double_conv_backward(
                &self.enc1[lvl].conv1,
                &self.enc1[lvl].conv2,
                &tr.enc_r,
                &d_feat_r,
            )?;
            grads.insert(format!("enc1.level{}.conv1", lvl + 1), g1);
            grads.insert(format!("enc1.level{}.conv2", lvl + 1), g2);
            d_cont_r = Some(d_in_r);

            d_cont_n = match (&self.enc2, &tr.enc_n, d_pool_n) {
                (Some(enc2), Some((enc_tr, pool_ctx)), Some(d_pool_n)) => {
                    let d_feat_n = maxpool_backward(pool_ctx, &d_pool_n)?;
                    let (d_in_n, g1, g2) = double_conv_backward(
                        &enc2[lvl].conv1,
                        &enc2[lvl].conv2,
                        enc_tr,
                        &d_feat_n,
                    )?;
                    grads.insert(format!("enc2.level{}.conv1", lvl + 1), g1);
                    grads.insert(format!("enc2.level{}.conv2", lvl + 1), g2);
                    Some(d_in_n)
                }
                (None, None, None) => None,
                _ => {
                    return Err(Error::GradientMismatch {
                        name: format!("level{}", lvl + 1),
                        detail: "trace stream count disagrees with model structure".into(),
                    })
                }
            };
        }
        Ok(grads)
    }
}

/// Add any present gradients; absent ones are zero.
fn sum_grads<F: Scalar>(
    shape: crate::tensor::Shape,
    parts: &[Option<&Tensor<F>>],
) -> Result<Tensor<F>> {
    let mut acc: Option<Tensor<F>> = None;
    for p in parts.iter().copied().flatten() {
        acc = Some(match acc {
            Some(a) => elementwise(ElemOp::Add, &a, p)?,
            None => (*p).clone(),
        });
    }
    Ok(acc.unwrap_or_else(|| Tensor::zeros(shape)))
}

pub struct DoubleConvTrace<F> {
    c1: ConvCtx<F>,
    r1: ReluCtx<F>,
    c2: ConvCtx<F>,
    r2: ReluCtx<F>,
}

fn double_conv_forward<F: Scalar>(
    x: &Tensor<F>,
    conv1: &ConvKernel<F>,
    conv2: &ConvKernel<F>,
) -> Result<(Tensor<F>, DoubleConvTrace<F>)> {
    let (pre1, c1) = conv_forward(x, conv1)?;
    let (act1, r1) = relu_forward(&pre1);
    let (pre2, c2) = conv_forward(&act1, conv2)?;
    let (act2, r2) = relu_forward(&pre2);
    Ok((act2, DoubleConvTrace { c1, r1, c2, r2 }))
}

fn double_conv_backward<F: Scalar>(
    conv1: &ConvKernel<F>,
    conv2: &ConvKernel<F>,
    tr: &DoubleConvTrace<F>,
    upstream: &Tensor<F>,
) -> Result<(Tensor<F>, KernelGrad<F>, KernelGrad<F>)> {
    let d_pre2 = relu_backward(&tr.r2, upstream)?;
    let (d_act1, g2) = conv_backward(conv2, &tr.c2, &d_pre2)?;
    let d_pre1 = relu_backward(&tr.r1, &d_act1)?;
    let (d_x, g1) = conv_backward(conv1, &tr.c1, &d_pre1)?;
    Ok((d_x, g1, g2))
}

pub struct LevelTrace<F> {
    enc_r: DoubleConvTrace<F>,
    pool_r: PoolCtx,
    enc_n: Option<(DoubleConvTrace<F>, PoolCtx)>,
    fusion: FusionTrace<F>,
}

impl<F: Scalar> LevelTrace<F> {
    /// Shape of the pooled feature map at this level: half the conv input's
    /// spatial size, recovered from the pooling context.
    fn pool_shape(&self) -> crate::tensor::Shape {
        let [n, c, h, w] = self.pool_r.input_shape();
        [n, c, h / 2, w / 2]
    }
}

pub enum FusionTrace<F> {
    Proca(Box<ProcaTrace<F>>),
    Add,
    Single,
}

pub struct UpTrace<F> {
    up: UpsampleCtx,
    upc: ConvCtx<F>,
    upr: ReluCtx<F>,
    cat: Option<ConcatCtx>,
    dc: DoubleConvTrace<F>,
}

pub struct Trace<F> {
    levels: Vec<LevelTrace<F>>,
    bottleneck: DoubleConvTrace<F>,
    decoder: Vec<UpTrace<F>>,
    head: ConvCtx<F>,
}
