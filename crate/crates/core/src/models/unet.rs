use ndarray::Array4;
use rand::Rng;

use super::NetConfig;
use crate::nn::{
    concat_channels, join, split_channels, BlockCache, ConvBlock, MaxPool, Param, Parameterized, PoolCache, Scalar,
    UpConv,
};

/// Encoder-decoder backbone with skip connections.
///
/// The stem runs two 3×3×3 convolutions without through-plane padding, so a
/// 5-slice slab collapses to the center slice (5 → 3 → 1). Every later layer
/// works on that single slice; pooling and upsampling act in-plane only.
#[derive(Debug, Clone)]
pub struct UNet<T> {
    pub stem: [ConvBlock<T>; 2],
    pub encoder: Vec<[ConvBlock<T>; 2]>,
    pub decoder: Vec<Decoder<T>>,
    widths: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct Decoder<T> {
    pub up: UpConv<T>,
    pub blocks: [ConvBlock<T>; 2],
}

#[derive(Debug, Clone)]
pub struct UNetCache<T> {
    stem: [BlockCache<T>; 2],
    encoder: Vec<(PoolCache, BlockCache<T>, BlockCache<T>)>,
    decoder: Vec<(Array4<T>, BlockCache<T>, BlockCache<T>)>,
}

impl<T: Scalar> UNetCache<T> {
    pub fn output(&self) -> &Array4<T> {
        match self.decoder.first() {
            Some((_, _, b)) => b.output(),
            None => self.stem[1].output(),
        }
    }
}

impl<T: Scalar> UNet<T> {
    pub fn new<R: Rng>(cfg: &NetConfig, in_channels: usize, rng: &mut R) -> Self {
        let widths = cfg.widths();
        let c0 = widths[0];
        let stem = [
            ConvBlock::new(in_channels, c0, 3, 3, 0, rng),
            ConvBlock::new(c0, c0, 3, 3, 0, rng),
        ];
        let encoder = (1..cfg.depth)
            .map(|l| {
                [
                    ConvBlock::new(widths[l - 1], widths[l], 1, 3, 0, rng),
                    ConvBlock::new(widths[l], widths[l], 1, 3, 0, rng),
                ]
            })
            .collect();
        let decoder = (0..cfg.depth - 1)
            .map(|l| Decoder {
                up: UpConv::new(widths[l + 1], widths[l], rng),
                blocks: [
                    ConvBlock::new(2 * widths[l], widths[l], 1, 3, 0, rng),
                    ConvBlock::new(widths[l], widths[l], 1, 3, 0, rng),
                ],
            })
            .collect();
        UNet {
            stem,
            encoder,
            decoder,
            widths,
        }
    }

    pub fn out_channels(&self) -> usize {
        self.widths[0]
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let mut cur = self.stem[1].forward(&self.stem[0].forward(x));
        let mut skips = Vec::with_capacity(self.widths.len());
        for blocks in &self.encoder {
            let (pooled, _) = MaxPool::forward(&cur);
            skips.push(cur);
            cur = blocks[1].forward(&blocks[0].forward(&pooled));
        }
        for (l, dec) in self.decoder.iter().enumerate().rev() {
            let cat = concat_channels(&dec.up.forward(&cur), &skips[l]);
            cur = dec.blocks[1].forward(&dec.blocks[0].forward(&cat));
        }
        cur
    }

    pub fn forward_cached(&self, x: &Array4<T>) -> UNetCache<T> {
        let s0 = self.stem[0].forward_cached(x);
        let s1 = self.stem[1].forward_cached(s0.output());
        let mut encoder: Vec<(PoolCache, BlockCache<T>, BlockCache<T>)> = Vec::with_capacity(self.encoder.len());
        for blocks in &self.encoder {
            let prev = encoder.last().map(|(_, _, b)| b.output()).unwrap_or(s1.output());
            let (pooled, pc) = MaxPool::forward(prev);
            let a = blocks[0].forward_cached(&pooled);
            let b = blocks[1].forward_cached(a.output());
            encoder.push((pc, a, b));
        }
        let skip = |l: usize| -> &Array4<T> {
            if l == 0 {
                s1.output()
            } else {
                encoder[l - 1].2.output()
            }
        };
        let mut decoder = Vec::with_capacity(self.decoder.len());
        let mut cur: Array4<T> = skip(self.encoder.len()).clone();
        for (l, dec) in self.decoder.iter().enumerate().rev() {
            let cat = concat_channels(&dec.up.forward(&cur), skip(l));
            let a = dec.blocks[0].forward_cached(&cat);
            let b = dec.blocks[1].forward_cached(a.output());
            let next = b.output().clone();
            decoder.push((std::mem::replace(&mut cur, next), a, b));
        }
        decoder.reverse();
        UNetCache {
            stem: [s0, s1],
            encoder,
            decoder,
        }
    }

    /// Backpropagates `g_out` (gradient on the final feature map). Returns the
    /// input gradient when requested.
    pub fn backward(&mut self, cache: &UNetCache<T>, g_out: &Array4<T>, need_input_grad: bool) -> Option<Array4<T>> {
        let depth = self.widths.len();
        let mut skip_grads: Vec<Option<Array4<T>>> = vec![None; depth];
        let mut g = g_out.clone();
        for l in 0..depth - 1 {
            let dec = &mut self.decoder[l];
            let (up_in, a, b) = &cache.decoder[l];
            g = dec.blocks[1].backward(b, &g, true).expect("input grad");
            g = dec.blocks[0].backward(a, &g, true).expect("input grad");
            let (g_up, g_skip) = split_channels(&g, self.widths[l]);
            skip_grads[l] = Some(g_skip);
            g = dec.up.backward(up_in, &g_up);
        }
        for l in (1..depth).rev() {
            if let Some(s) = &skip_grads[l] {
                g += s;
            }
            let blocks = &mut self.encoder[l - 1];
            let (pc, a, b) = &cache.encoder[l - 1];
            g = blocks[1].backward(b, &g, true).expect("input grad");
            g = blocks[0].backward(a, &g, true).expect("input grad");
            g = MaxPool::backward(pc, &g);
        }
        if let Some(s) = &skip_grads[0] {
            g += s;
        }
        g = self.stem[1].backward(&cache.stem[1], &g, true).expect("input grad");
        self.stem[0].backward(&cache.stem[0], &g, need_input_grad)
    }
}

impl<T: Scalar> Parameterized<T> for UNet<T> {
    fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Param<T>)>) {
        for (i, b) in self.stem.iter().enumerate() {
            b.visit(&join(prefix, &format!("stem.{i}")), out);
        }
        for (l, blocks) in self.encoder.iter().enumerate() {
            for (i, b) in blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("enc.{}.{i}", l + 1)), out);
            }
        }
        for (l, dec) in self.decoder.iter().enumerate() {
            dec.up.visit(&join(prefix, &format!("dec.{l}.up")), out);
            for (i, b) in dec.blocks.iter().enumerate() {
                b.visit(&join(prefix, &format!("dec.{l}.{i}")), out);
            }
        }
    }

    fn visit_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Param<T>)>) {
        for (i, b) in self.stem.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("stem.{i}")), out);
        }
        for (l, blocks) in self.encoder.iter_mut().enumerate() {
            for (i, b) in blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("enc.{}.{i}", l + 1)), out);
            }
        }
        for (l, dec) in self.decoder.iter_mut().enumerate() {
            dec.up.visit_mut(&join(prefix, &format!("dec.{l}.up")), out);
            for (i, b) in dec.blocks.iter_mut().enumerate() {
                b.visit_mut(&join(prefix, &format!("dec.{l}.{i}")), out);
            }
        }
    }
}
