use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    max_pool2, max_pool2_backward, sigmoid, softmax_backward, softmax_channels, BatchNorm, BatchNormCache, Conv2d,
    ConvTranspose2x2, Param,
};
use super::tensor::Tensor;
use crate::domain::{BBoxMap, MaskStack, NUM_TEETH};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Plain U-Net; no prior input.
    UNet,
    /// U-Net with box-gated skip connections.
    OralBbNet,
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unet" => Ok(Variant::UNet),
            "oralbbnet" | "oral-bb-net" => Ok(Variant::OralBbNet),
            other => Err(Error::Config(format!("unknown variant {other:?} (expected unet or oralbbnet)"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Variant::UNet => "unet",
            Variant::OralBbNet => "oralbbnet",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub depth: usize,
    pub base_filters: usize,
    pub bb_levels: usize,
    pub input_channels: usize,
    pub bbox_channels: usize,
    pub output_channels: usize,
    pub drop_rate: f64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            variant: Variant::OralBbNet,
            depth: 4,
            base_filters: 64,
            bb_levels: 4,
            input_channels: 1,
            bbox_channels: NUM_TEETH,
            output_channels: NUM_TEETH + 1,
            drop_rate: 0.12,
        }
    }
}

impl NetworkConfig {
    /// Small configuration used for desk-scale runs.
    pub fn small() -> Self {
        NetworkConfig {
            base_filters: 8,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.depth == 0 || self.depth > 8 {
            return fail(format!("depth must be in 1..=8, got {}", self.depth));
        }
        if self.base_filters == 0 {
            return fail("base_filters must be >= 1".into());
        }
        if self.bb_levels > self.depth {
            return fail(format!("bb_levels {} exceeds depth {}", self.bb_levels, self.depth));
        }
        if self.input_channels == 0 || self.bbox_channels == 0 || self.output_channels < 2 {
            return fail("channel counts must be positive (output >= 2)".into());
        }
        if !(0.0..1.0).contains(&self.drop_rate) {
            return fail(format!("drop_rate must be in [0, 1), got {}", self.drop_rate));
        }
        Ok(())
    }

    pub fn filters(&self, level: usize) -> usize {
        self.base_filters << level
    }

    pub fn check_resolution(&self, h: usize, w: usize) -> Result<()> {
        let d = 1usize << self.depth;
        if h == 0 || w == 0 || !h.is_multiple_of(d) || !w.is_multiple_of(d) {
            return Err(Error::Config(format!("resolution {h}x{w} is not divisible by 2^{} = {d}", self.depth)));
        }
        Ok(())
    }

    pub fn is_gated(&self) -> bool {
        self.variant == Variant::OralBbNet && self.bb_levels > 0
    }
}

/// Conv -> ReLU -> BatchNorm -> SpatialDropout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvBlock {
    pub conv: Conv2d,
    pub bn: BatchNorm,
    pub drop_rate: f32,
}

#[derive(Debug, Clone)]
pub struct ConvBlockCache {
    x: Tensor,
    relu: Tensor,
    bn: BatchNormCache,
    /// Per `(sample, channel)` dropout scale: 0 or `1 / (1 - p)`.
    keep: Vec<f32>,
}

impl ConvBlock {
    pub fn new(cin: usize, cout: usize, k: usize, drop_rate: f64, rng: &mut impl Rng) -> Self {
        ConvBlock {
            conv: Conv2d::new(cin, cout, k, std::f64::consts::SQRT_2, rng),
            bn: BatchNorm::new(cout),
            drop_rate: drop_rate as f32,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        let mut y = self.conv.forward(x);
        y.data.iter_mut().for_each(|v| *v = v.max(0.0));
        self.bn.forward_eval(&y)
    }

    /// Train-mode forward; updates the running statistics.
    pub fn forward_train(&mut self, x: &Tensor, rng: &mut impl Rng) -> (Tensor, ConvBlockCache) {
        let mut relu = self.conv.forward(x);
        relu.data.iter_mut().for_each(|v| *v = v.max(0.0));
        let (mut y, bn) = self.bn.forward_train(&relu);
        self.bn.update_running(&bn);
        let p = self.drop_rate;
        let keep: Vec<f32> = (0..y.n * y.c)
            .map(|_| {
                if p > 0.0 && rng.random::<f32>() < p {
                    0.0
                } else {
                    1.0 / (1.0 - p)
                }
            })
            .collect();
        let plane = y.plane();
        for (chunk, &s) in y.data.chunks_mut(plane).zip(&keep) {
            if s != 1.0 {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        (
            y,
            ConvBlockCache {
                x: x.clone(),
                relu,
                bn,
                keep,
            },
        )
    }

    pub fn backward(&mut self, cache: &ConvBlockCache, dy: &Tensor, need_dx: bool) -> Option<Tensor> {
        let mut d = dy.clone();
        let plane = d.plane();
        for (chunk, &s) in d.data.chunks_mut(plane).zip(&cache.keep) {
            if s != 1.0 {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
        }
        let mut d = self.bn.backward(&cache.bn, &d);
        for (g, &r) in d.data.iter_mut().zip(&cache.relu.data) {
            if r <= 0.0 {
                *g = 0.0;
            }
        }
        self.conv.backward(&cache.x, &d, need_dx)
    }

    fn params_mut(&mut self) -> [&mut Param; 4] {
        [
            &mut self.conv.weight,
            &mut self.conv.bias,
            &mut self.bn.gamma,
            &mut self.bn.beta,
        ]
    }
}

/// Box-prior gate: pooled prior -> conv -> conv -> sigmoid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gate {
    pub conv1: Conv2d,
    pub conv2: Conv2d,
}

#[derive(Debug, Clone)]
struct GateCache {
    z1: Tensor,
    gate: Tensor,
}

impl Gate {
    fn new(cin: usize, f: usize, rng: &mut impl Rng) -> Self {
        Gate {
            conv1: Conv2d::new(cin, f, 3, std::f64::consts::SQRT_2, rng),
            conv2: Conv2d::new(f, f, 3, 1.0, rng),
        }
    }

    fn forward(&self, active: &[Vec<u32>], h: usize, w: usize) -> (Tensor, Tensor) {
        let z1 = self.conv1.forward_sparse(active, h, w);
        let mut g = self.conv2.forward(&z1);
        g.data.iter_mut().for_each(|v| *v = sigmoid(*v));
        (z1, g)
    }

    fn backward(&mut self, active: &[Vec<u32>], cache: &GateCache, dgate: &Tensor) {
        let mut dz2 = dgate.clone();
        for (d, &g) in dz2.data.iter_mut().zip(&cache.gate.data) {
            *d *= g * (1.0 - g);
        }
        let dz1 = self.conv2.backward(&cache.z1, &dz2, true).expect("input gradient requested");
        self.conv1.backward_sparse(active, &dz1);
    }
}

/// Bounding-box priors pooled to every gated level, stored as lists of
/// active `(channel, pixel)` indices per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorPyramid {
    height: usize,
    width: usize,
    /// `levels[l][sample]`
    levels: Vec<Vec<Vec<u32>>>,
}

impl PriorPyramid {
    pub fn new(maps: &[&BBoxMap], levels: usize) -> Result<Self> {
        let first = maps.first().ok_or_else(|| Error::shape("prior batch", "at least one map", 0))?;
        let (height, width) = first.resolution();
        let mut out = vec![Vec::with_capacity(maps.len()); levels];
        for m in maps {
            if m.resolution() != (height, width) {
                return Err(Error::shape("prior batch", (height, width), m.resolution()));
            }
            let mut cur = (*m).clone();
            for (l, slot) in out.iter_mut().enumerate() {
                if l > 0 {
                    if cur.height() % 2 != 0 || cur.width() % 2 != 0 {
                        return Err(Error::shape(
                            format!("prior pooling to level {l}"),
                            "even resolution",
                            cur.resolution(),
                        ));
                    }
                    cur = cur.max_pool2();
                }
                let idx = cur
                    .as_raw()
                    .iter()
                    .enumerate()
                    .filter(|(_, &v)| v != 0)
                    .map(|(i, _)| i as u32)
                    .collect();
                slot.push(idx);
            }
        }
        Ok(PriorPyramid {
            height,
            width,
            levels: out,
        })
    }

    pub fn batch(&self) -> usize {
        self.levels.first().map_or(0, |l| l.len())
    }

    pub fn resolution(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn level(&self, l: usize) -> &[Vec<u32>] {
        &self.levels[l]
    }

    pub fn num_levels(&self) -> usize {
        self.levels.len()
    }
}

/// Intermediate activations kept for the backward pass.
pub struct ForwardCache {
    enc: Vec<[ConvBlockCache; 2]>,
    pool_arg: Vec<Vec<u8>>,
    skips: Vec<Tensor>,
    gates: Vec<Option<GateCache>>,
    bottleneck: [ConvBlockCache; 2],
    up_in: Vec<Tensor>,
    dec: Vec<[ConvBlockCache; 2]>,
    head_in: Tensor,
    probs: Tensor,
}

impl ForwardCache {
    pub fn probs(&self) -> &Tensor {
        &self.probs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub config: NetworkConfig,
    pub encoder: Vec<[ConvBlock; 2]>,
    pub bottleneck: [ConvBlock; 2],
    /// Indexed by the level the upsampler produces.
    pub upsample: Vec<ConvTranspose2x2>,
    pub decoder: Vec<[ConvBlock; 2]>,
    pub head: Conv2d,
    /// One gate per level `0..bb_levels`; empty when bypassed.
    pub gates: Vec<Gate>,
}

const GATE_STREAM: u64 = 1;

impl Network {
    /// Seeded initialization. Main-path and gate weights come from separate
    /// random streams, so a U-Net and a gated network built from the same seed
    /// share their main-path weights.
    pub fn new(config: NetworkConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = config.drop_rate;
        let l = config.depth;
        let mut encoder = Vec::with_capacity(l);
        let mut cin = config.input_channels;
        for lvl in 0..l {
            let f = config.filters(lvl);
            encoder.push([ConvBlock::new(cin, f, 3, p, &mut rng), ConvBlock::new(f, f, 3, p, &mut rng)]);
            cin = f;
        }
        let fb = config.filters(l);
        let bottleneck = [ConvBlock::new(cin, fb, 3, p, &mut rng), ConvBlock::new(fb, fb, 3, p, &mut rng)];
        let mut upsample = Vec::with_capacity(l);
        let mut decoder = Vec::with_capacity(l);
        for lvl in 0..l {
            let f = config.filters(lvl);
            upsample.push(ConvTranspose2x2::new(config.filters(lvl + 1), f, &mut rng));
            let k2 = if lvl == 0 { 1 } else { 3 };
            decoder.push([ConvBlock::new(2 * f, f, 3, p, &mut rng), ConvBlock::new(f, f, k2, p, &mut rng)]);
        }
        let head = Conv2d::new(config.filters(0), config.output_channels, 1, 1.0, &mut rng);
        let gates = if config.is_gated() {
            let mut grng = ChaCha8Rng::seed_from_u64(seed);
            grng.set_stream(GATE_STREAM);
            (0..config.bb_levels)
                .map(|lvl| Gate::new(config.bbox_channels, config.filters(lvl), &mut grng))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Network {
            config,
            encoder,
            bottleneck,
            upsample,
            decoder,
            head,
            gates,
        })
    }

    /// Copy with the gates removed: every skip passes through unmodified.
    pub fn without_gates(&self) -> Network {
        let mut n = self.clone();
        n.gates.clear();
        n.config.variant = Variant::UNet;
        n
    }

    pub fn is_gated(&self) -> bool {
        !self.gates.is_empty()
    }

    fn check_inputs(&self, x: &Tensor, prior: Option<&PriorPyramid>) -> Result<()> {
        if x.c != self.config.input_channels {
            return Err(Error::shape("network input channels", self.config.input_channels, x.c));
        }
        self.config.check_resolution(x.h, x.w)?;
        match (self.is_gated(), prior) {
            (true, None) => Err(Error::MissingPrior("gated network requires a bounding-box prior".into())),
            (true, Some(p)) => {
                if p.batch() != x.n || p.resolution() != (x.h, x.w) || p.num_levels() < self.gates.len() {
                    return Err(Error::shape(
                        "prior pyramid",
                        (x.n, x.h, x.w, self.gates.len()),
                        (p.batch(), p.height, p.width, p.num_levels()),
                    ));
                }
                Ok(())
            }
            (false, _) => Ok(()),
        }
    }

    /// Gate activations at one level.
    pub fn gate_map(&self, level: usize, prior: &PriorPyramid) -> Result<Tensor> {
        let gate = self
            .gates
            .get(level)
            .ok_or_else(|| Error::Config(format!("no gate at level {level}")))?;
        let (h, w) = (prior.height >> level, prior.width >> level);
        Ok(gate.forward(prior.level(level), h, w).1)
    }

    fn check_finite(t: &Tensor, what: &str) -> Result<()> {
        if t.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!("activations at {what}")))
        }
    }

    /// Eval-mode forward: softmax probabilities `N x C_s x H x W`.
    pub fn forward(&self, x: &Tensor, prior: Option<&PriorPyramid>) -> Result<Tensor> {
        self.check_inputs(x, prior)?;
        let mut cur = x.clone();
        let mut skips = Vec::with_capacity(self.config.depth);
        for (lvl, [a, b]) in self.encoder.iter().enumerate() {
            let s = b.forward(&a.forward(&cur));
            Self::check_finite(&s, &format!("encoder level {lvl}"))?;
            cur = max_pool2(&s).0;
            skips.push(s);
        }
        cur = self.bottleneck[1].forward(&self.bottleneck[0].forward(&cur));
        Self::check_finite(&cur, "bottleneck")?;
        for lvl in (0..self.config.depth).rev() {
            let up = self.upsample[lvl].forward(&cur);
            let mut skip = std::mem::replace(&mut skips[lvl], Tensor::zeros(0, 0, 0, 0));
            if let (Some(gate), Some(p)) = (self.gates.get(lvl), prior) {
                let (_, g) = gate.forward(p.level(lvl), skip.h, skip.w);
                skip.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s *= g);
            }
            let cat = Tensor::concat_channels(&up, &skip)?;
            let [a, b] = &self.decoder[lvl];
            cur = b.forward(&a.forward(&cat));
            Self::check_finite(&cur, &format!("decoder level {lvl}"))?;
        }
        let mut out = self.head.forward(&cur);
        softmax_channels(&mut out);
        Self::check_finite(&out, "output")?;
        Ok(out)
    }

    /// Train-mode forward (dropout active, batch statistics, running
    /// statistics updated).
    pub fn forward_train(
        &mut self,
        x: &Tensor,
        prior: Option<&PriorPyramid>,
        rng: &mut impl Rng,
    ) -> Result<ForwardCache> {
        self.check_inputs(x, prior)?;
        let depth = self.config.depth;
        let mut cur = x.clone();
        let mut enc = Vec::with_capacity(depth);
        let mut pool_arg = Vec::with_capacity(depth);
        let mut skips = Vec::with_capacity(depth);
        for (lvl, [a, b]) in self.encoder.iter_mut().enumerate() {
            let (y, ca) = a.forward_train(&cur, rng);
            let (s, cb) = b.forward_train(&y, rng);
            Self::check_finite(&s, &format!("encoder level {lvl}"))?;
            let (pooled, arg) = max_pool2(&s);
            cur = pooled;
            enc.push([ca, cb]);
            pool_arg.push(arg);
            skips.push(s);
        }
        let (y, c0) = self.bottleneck[0].forward_train(&cur, rng);
        let (y, c1) = self.bottleneck[1].forward_train(&y, rng);
        Self::check_finite(&y, "bottleneck")?;
        cur = y;
        let mut gates: Vec<Option<GateCache>> = (0..depth).map(|_| None).collect();
        let mut up_in: Vec<Tensor> = (0..depth).map(|_| Tensor::zeros(0, 0, 0, 0)).collect();
        let mut dec: Vec<Option<[ConvBlockCache; 2]>> = (0..depth).map(|_| None).collect();
        for lvl in (0..depth).rev() {
            let up = self.upsample[lvl].forward(&cur);
            up_in[lvl] = cur;
            let skip = &skips[lvl];
            let cat = match (self.gates.get(lvl), prior) {
                (Some(gate), Some(p)) => {
                    let (z1, g) = gate.forward(p.level(lvl), skip.h, skip.w);
                    let mut gated = skip.clone();
                    gated.data.iter_mut().zip(&g.data).for_each(|(s, g)| *s *= g);
                    gates[lvl] = Some(GateCache { z1, gate: g });
                    Tensor::concat_channels(&up, &gated)?
                }
                _ => Tensor::concat_channels(&up, skip)?,
            };
            let [a, b] = &mut self.decoder[lvl];
            let (y, ca) = a.forward_train(&cat, rng);
            let (y, cb) = b.forward_train(&y, rng);
            Self::check_finite(&y, &format!("decoder level {lvl}"))?;
            dec[lvl] = Some([ca, cb]);
            cur = y;
        }
        let mut probs = self.head.forward(&cur);
        softmax_channels(&mut probs);
        Self::check_finite(&probs, "output")?;
        Ok(ForwardCache {
            enc,
            pool_arg,
            skips,
            gates,
            bottleneck: [c0, c1],
            up_in,
            dec: dec.into_iter().map(|d| d.expect("every level visited")).collect(),
            head_in: cur,
            probs,
        })
    }

    /// Accumulates parameter gradients given `d loss / d probs`. The prior is
    /// an input only; nothing flows back into it.
    pub fn backward(&mut self, cache: &ForwardCache, dprobs: &Tensor, prior: Option<&PriorPyramid>) -> Result<()> {
        if dprobs.shape() != cache.probs.shape() {
            return Err(Error::shape("output gradient", cache.probs.shape(), dprobs.shape()));
        }
        let depth = self.config.depth;
        let dlogits = softmax_backward(&cache.probs, dprobs);
        let mut d = self.head.backward(&cache.head_in, &dlogits, true).expect("dx");
        let mut dskips: Vec<Tensor> = Vec::with_capacity(depth);
        dskips.resize_with(depth, || Tensor::zeros(0, 0, 0, 0));
        for lvl in 0..depth {
            let [a, b] = &mut self.decoder[lvl];
            let [ca, cb] = &cache.dec[lvl];
            let dy = b.backward(cb, &d, true).expect("dx");
            let dcat = a.backward(ca, &dy, true).expect("dx");
            let f = self.config.filters(lvl);
            let (dup, mut dskip) = dcat.split_channels(f);
            if let (Some(gc), Some(p)) = (&cache.gates[lvl], prior) {
                let skip = &cache.skips[lvl];
                let mut dgate = dskip.clone();
                dgate.data.iter_mut().zip(&skip.data).for_each(|(dg, s)| *dg *= s);
                dskip.data.iter_mut().zip(&gc.gate.data).for_each(|(ds, g)| *ds *= g);
                self.gates[lvl].backward(p.level(lvl), gc, &dgate);
            }
            dskips[lvl] = dskip;
            d = self.upsample[lvl].backward(&cache.up_in[lvl], &dup);
        }
        let dy = self.bottleneck[1].backward(&cache.bottleneck[1], &d, true).expect("dx");
        d = self.bottleneck[0].backward(&cache.bottleneck[0], &dy, true).expect("dx");
        for lvl in (0..depth).rev() {
            let mut ds = max_pool2_backward(&d, &cache.pool_arg[lvl]);
            ds.data.iter_mut().zip(&dskips[lvl].data).for_each(|(a, b)| *a += b);
            let [a, b] = &mut self.encoder[lvl];
            let [ca, cb] = &cache.enc[lvl];
            let dy = b.backward(cb, &ds, true).expect("dx");
            let need = lvl > 0;
            match a.backward(ca, &dy, need) {
                Some(dx) => d = dx,
                None => break,
            }
        }
        Ok(())
    }

    /// All trainable parameters in a fixed order.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out: Vec<&mut Param> = Vec::new();
        for blocks in self.encoder.iter_mut() {
            for b in blocks.iter_mut() {
                out.extend(b.params_mut());
            }
        }
        for b in self.bottleneck.iter_mut() {
            out.extend(b.params_mut());
        }
        for (up, blocks) in self.upsample.iter_mut().zip(self.decoder.iter_mut()) {
            out.push(&mut up.weight);
            out.push(&mut up.bias);
            for b in blocks.iter_mut() {
                out.extend(b.params_mut());
            }
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        for g in self.gates.iter_mut() {
            out.extend([&mut g.conv1.weight, &mut g.conv1.bias, &mut g.conv2.weight, &mut g.conv2.bias]);
        }
        out
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Param::zero_grad);
    }

    pub fn num_params(&self) -> usize {
        self.clone().params_mut().iter().map(|p| p.len()).sum()
    }

    /// Every stored tensor with a stable name, including batch-norm running
    /// statistics.
    pub fn named_tensors(&self) -> Vec<(String, &[f32])> {
        let mut out: Vec<(String, &[f32])> = Vec::new();
        fn push_block<'a>(name: &str, b: &'a ConvBlock, out: &mut Vec<(String, &'a [f32])>) {
            out.push((format!("{name}.conv.weight"), &b.conv.weight.value));
            out.push((format!("{name}.conv.bias"), &b.conv.bias.value));
            out.push((format!("{name}.bn.gamma"), &b.bn.gamma.value));
            out.push((format!("{name}.bn.beta"), &b.bn.beta.value));
            out.push((format!("{name}.bn.running_mean"), &b.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &b.bn.running_var));
        }
        for (l, blocks) in self.encoder.iter().enumerate() {
            for (j, b) in blocks.iter().enumerate() {
                push_block(&format!("encoder.{l}.{j}"), b, &mut out);
            }
        }
        for (j, b) in self.bottleneck.iter().enumerate() {
            push_block(&format!("bottleneck.{j}"), b, &mut out);
        }
        for (l, (up, blocks)) in self.upsample.iter().zip(&self.decoder).enumerate() {
            out.push((format!("upsample.{l}.weight"), &up.weight.value));
            out.push((format!("upsample.{l}.bias"), &up.bias.value));
            for (j, b) in blocks.iter().enumerate() {
                push_block(&format!("decoder.{l}.{j}"), b, &mut out);
            }
        }
        out.push(("head.weight".into(), &self.head.weight.value));
        out.push(("head.bias".into(), &self.head.bias.value));
        for (l, g) in self.gates.iter().enumerate() {
            out.push((format!("gate.{l}.conv1.weight"), &g.conv1.weight.value));
            out.push((format!("gate.{l}.conv1.bias"), &g.conv1.bias.value));
            out.push((format!("gate.{l}.conv2.weight"), &g.conv2.weight.value));
            out.push((format!("gate.{l}.conv2.bias"), &g.conv2.bias.value));
        }
        out
    }

    /// Mutable counterpart of [`Network::named_tensors`], same order.
    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Vec<f32>)> {
        let mut out: Vec<(String, &mut Vec<f32>)> = Vec::new();
        fn push_block<'a>(name: &str, b: &'a mut ConvBlock, out: &mut Vec<(String, &'a mut Vec<f32>)>) {
            out.push((format!("{name}.conv.weight"), &mut b.conv.weight.value));
            out.push((format!("{name}.conv.bias"), &mut b.conv.bias.value));
            out.push((format!("{name}.bn.gamma"), &mut b.bn.gamma.value));
            out.push((format!("{name}.bn.beta"), &mut b.bn.beta.value));
            out.push((format!("{name}.bn.running_mean"), &mut b.bn.running_mean));
            out.push((format!("{name}.bn.running_var"), &mut b.bn.running_var));
        }
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (j, b) in blocks.iter_mut().enumerate() {
                push_block(&format!("encoder.{l}.{j}"), b, &mut out);
            }
        }
        for (j, b) in self.bottleneck.iter_mut().enumerate() {
            push_block(&format!("bottleneck.{j}"), b, &mut out);
        }
        for (l, (up, blocks)) in self.upsample.iter_mut().zip(self.decoder.iter_mut()).enumerate() {
            out.push((format!("upsample.{l}.weight"), &mut up.weight.value));
            out.push((format!("upsample.{l}.bias"), &mut up.bias.value));
            for (j, b) in blocks.iter_mut().enumerate() {
                push_block(&format!("decoder.{l}.{j}"), b, &mut out);
            }
        }
        out.push(("head.weight".into(), &mut self.head.weight.value));
        out.push(("head.bias".into(), &mut self.head.bias.value));
        for (l, g) in self.gates.iter_mut().enumerate() {
            out.push((format!("gate.{l}.conv1.weight"), &mut g.conv1.weight.value));
            out.push((format!("gate.{l}.conv1.bias"), &mut g.conv1.bias.value));
            out.push((format!("gate.{l}.conv2.weight"), &mut g.conv2.weight.value));
            out.push((format!("gate.{l}.conv2.bias"), &mut g.conv2.bias.value));
        }
        out
    }
}

/// Per-pixel argmax over all output channels; the last (background) channel
/// is discarded. `probs` holds one sample.
pub fn predict_mask(probs: &Tensor, sample: usize) -> Result<MaskStack> {
    if probs.c != NUM_TEETH + 1 || sample >= probs.n {
        return Err(Error::shape("probability map", (NUM_TEETH + 1, sample + 1), (probs.c, probs.n)));
    }
    let (h, w, p) = (probs.h, probs.w, probs.plane());
    let s = probs.sample(sample);
    let mut raw = vec![0u8; NUM_TEETH * p];
    for px in 0..p {
        let mut best = 0;
        for c in 1..probs.c {
            if s[c * p + px] > s[best * p + px] {
                best = c;
            }
        }
        if best < NUM_TEETH {
            raw[best * p + px] = 1;
        }
    }
    MaskStack::from_raw(h, w, raw)
}

/// Image batch tensor `N x 1 x H x W`.
pub fn image_batch(images: &[&crate::data::GrayImage]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("image batch", "at least one image", 0))?;
    let (h, w) = (first.height, first.width);
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if (im.height, im.width) != (h, w) {
            return Err(Error::shape("image batch", (h, w), (im.height, im.width)));
        }
        data.extend_from_slice(&im.data);
    }
    Tensor::from_vec(images.len(), 1, h, w, data)
}

/// Target tensor `N x 33 x H x W` (teeth then background) as `f64`.
pub fn target_batch(masks: &[&MaskStack]) -> Result<Vec<f64>> {
    let first = masks.first().ok_or_else(|| Error::shape("target batch", "at least one mask", 0))?;
    let (h, w) = first.resolution();
    let p = h * w;
    let mut out = Vec::with_capacity(masks.len() * (NUM_TEETH + 1) * p);
    for m in masks {
        if m.resolution() != (h, w) {
            return Err(Error::shape("target batch", (h, w), m.resolution()));
        }
        let mut bg = vec![1.0f64; p];
        for c in 0..NUM_TEETH {
            for (i, &v) in m.channel(c).iter().enumerate() {
                out.push(v as f64);
                if v != 0 {
                    bg[i] = 0.0;
                }
            }
        }
        out.extend_from_slice(&bg);
    }
    Ok(out)
}
