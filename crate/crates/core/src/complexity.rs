//! Closed-form parameter and multiply-accumulate counts.
//!
//! Counted operations: dense layers, convolutions (full and depthwise), bilinear
//! resizes (four taps per output element) and the selective scan
//! (`4·L·D·N + 2·L·D`). Normalization, activations and elementwise arithmetic are not
//! counted. These are the same operations the graph's own MAC counter charges, so the
//! estimate can be audited against an instrumented forward pass.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, Variant};
use crate::error::Result;
use crate::noise::SRM_CHANNELS;
use crate::ss2d::scan_macs;

/// FLOPs charged per multiply-accumulate unless configured otherwise.
pub const DEFAULT_FLOPS_PER_MAC: u64 = 1;

/// One row of the breakdown.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerCost {
    /// `encoder`, `noise` or `decoder`.
    pub module: String,
    pub name: String,
    pub params: u64,
    pub macs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub variant: Variant,
    pub height: usize,
    pub width: usize,
    pub flops_per_mac: u64,
    pub layers: Vec<LayerCost>,
    pub params: u64,
    pub macs: u64,
    pub flops: u64,
}

impl ComplexityReport {
    pub fn params_millions(&self) -> f64 {
        self.params as f64 / 1e6
    }

    pub fn gflops(&self) -> f64 {
        self.flops as f64 / 1e9
    }

    /// `(module, params, macs)` summed per module, in first-appearance order.
    pub fn modules(&self) -> Vec<(String, u64, u64)> {
        let mut out: Vec<(String, u64, u64)> = Vec::new();
        for l in &self.layers {
            match out.iter_mut().find(|m| m.0 == l.module) {
                Some(m) => {
                    m.1 += l.params;
                    m.2 += l.macs;
                }
                None => out.push((l.module.clone(), l.params, l.macs)),
            }
        }
        out
    }

    /// Plain-text table of every layer, the per-module sums and the totals.
    pub fn table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "variant {} at {}x{}, {} FLOP(s) per MAC",
            self.variant, self.height, self.width, self.flops_per_mac
        );
        let _ = writeln!(s, "{:<8} {:<36} {:>12} {:>16}", "module", "layer", "params", "MACs");
        for l in &self.layers {
            let _ = writeln!(s, "{:<8} {:<36} {:>12} {:>16}", l.module, l.name, l.params, l.macs);
        }
        for (m, p, c) in self.modules() {
            let _ = writeln!(s, "{:<8} {:<36} {:>12} {:>16}", m, "(module total)", p, c);
        }
        let _ = writeln!(
            s,
            "total params {} ({:.2} M), MACs {}, FLOPs {} ({:.2} G)",
            self.params,
            self.params_millions(),
            self.macs,
            self.flops,
            self.gflops()
        );
        s
    }
}

struct Builder {
    module: &'static str,
    layers: Vec<LayerCost>,
}

impl Builder {
    fn add(&mut self, name: impl Into<String>, params: usize, macs: u64) {
        self.layers.push(LayerCost {
            module: self.module.to_string(),
            name: name.into(),
            params: params as u64,
            macs,
        });
    }

    /// Dense layer applied at `rows` positions.
    fn linear(&mut self, name: impl Into<String>, rows: usize, cin: usize, cout: usize, bias: bool) {
        self.add(name, cin * cout + if bias { cout } else { 0 }, (rows * cin * cout) as u64);
    }

    /// `k×k` convolution with bias producing `out_pos` positions.
    fn conv(&mut self, name: impl Into<String>, cin: usize, cout: usize, k: usize, out_pos: usize, bias: bool) {
        let w = cout * cin * k * k;
        self.add(name, w + if bias { cout } else { 0 }, (w * out_pos) as u64);
    }

    fn norm(&mut self, name: impl Into<String>, c: usize) {
        self.add(name, 2 * c, 0);
    }
}

/// Per-layer breakdown of the network on an `h × w` input.
pub fn complexity(cfg: &ModelConfig, h: usize, w: usize, flops_per_mac: u64) -> Result<ComplexityReport> {
    cfg.validate()?;
    crate::config::check_input_size(h, w)?;
    let c = cfg.embed_dim;
    let n = cfg.state_dim;
    let lq = (h / 4) * (w / 4);
    let v = cfg.variant;

    let mut enc = Builder { module: "encoder", layers: Vec::new() };
    enc.conv("stem.conv", 3, c, 4, lq, true);
    enc.norm("stem.norm", c);
    if v == Variant::NoiseIntoEncoder {
        enc.linear("noise_proj", lq, c + cfg.mod_channels, c, true);
    }
    for i in 0..4 {
        let ci = cfg.stage_channels(i);
        let e = cfg.inner_channels(i);
        let l = lq >> (2 * i);
        if i > 0 {
            let cp = cfg.stage_channels(i - 1);
            enc.conv(format!("down{}.conv", i - 1), cp, ci, 2, l, true);
            enc.norm(format!("down{}.norm", i - 1), ci);
        }
        for j in 0..cfg.depths[i] {
            let b = format!("stage{i}.block{j}");
            let k = cfg.dwconv_kernel;
            enc.norm(format!("{b}.norm"), ci);
            enc.linear(format!("{b}.proj_in"), l, ci, e, true);
            enc.add(format!("{b}.dwconv"), e * k * k + e, (e * k * k * l) as u64);
            for d in 0..4 {
                let s = format!("{b}.ssm{d}");
                enc.linear(format!("{s}.delta"), l, e, e, true);
                enc.linear(format!("{s}.b"), l, e, n, false);
                enc.linear(format!("{s}.c"), l, e, n, false);
                // A_log is [E, N], D is [E]
                enc.add(format!("{s}.scan"), e * n + e, scan_macs(l, e, n));
            }
            enc.norm(format!("{b}.out_norm"), e);
            enc.linear(format!("{b}.proj_gate"), l, ci, e, true);
            enc.linear(format!("{b}.proj_out"), l, e, ci, true);
        }
    }

    let mut noise = Builder { module: "noise", layers: Vec::new() };
    if v.uses_noise() {
        let hw = h * w;
        let k = cfg.bayar_kernels;
        let cr = cfg.resid_channels;
        let half = cfg.mod_channels / 2;
        // fixed filters: no learnable parameters
        noise.add("srm", 0, (SRM_CHANNELS * 25 * hw) as u64);
        noise.conv("bayar", 3, k, 5, hw, false);
        noise.conv("resid.0", 3, cr, 3, hw, true);
        noise.conv("resid.1", cr, cr, 3, hw, true);
        noise.conv("resid.2", cr, cr, 3, hw, true);
        noise.conv("fuse.0", SRM_CHANNELS + k + cr, half, 3, (h / 2) * (w / 2), true);
        noise.conv("fuse.1", half, cfg.mod_channels, 3, lq, true);
        noise.norm("fuse.norm", cfg.mod_channels);
    }

    let mut dec = Builder { module: "decoder", layers: Vec::new() };
    for i in 0..4 {
        let r = cfg.ratios[i];
        let l = lq >> (2 * i);
        if v.uses_shuffle() {
            dec.linear(format!("expand{i}"), l, cfg.stage_channels(i), c * r * r, true);
        } else {
            dec.linear(format!("expand{i}"), l, cfg.stage_channels(i), c, true);
            if r > 1 {
                dec.add(format!("upsample{i}"), 0, (4 * c * lq) as u64);
            }
        }
    }
    let fuse_in = 4 * c + if v.noise_in_decoder() { cfg.mod_channels } else { 0 };
    dec.linear("fuse", lq, fuse_in, c, true);
    dec.linear("head", lq, c, 2, true);
    dec.add("logit_upsample", 0, (4 * 2 * h * w) as u64);

    let mut layers = enc.layers;
    layers.extend(noise.layers);
    layers.extend(dec.layers);
    let params = layers.iter().map(|l| l.params).sum();
    let macs: u64 = layers.iter().map(|l| l.macs).sum();
    Ok(ComplexityReport {
        variant: v,
        height: h,
        width: w,
        flops_per_mac,
        layers,
        params,
        macs,
        flops: macs * flops_per_mac,
    })
}

/// Learnable scalar count (SRM excluded, Bayar included).
pub fn param_count(cfg: &ModelConfig) -> Result<u64> {
    Ok(complexity(cfg, cfg.input_size.0, cfg.input_size.1, DEFAULT_FLOPS_PER_MAC)?.params)
}

/// FLOPs of one forward pass on an `h × w` input.
pub fn flops_estimate(cfg: &ModelConfig, h: usize, w: usize, flops_per_mac: u64) -> Result<u64> {
    Ok(complexity(cfg, h, w, flops_per_mac)?.flops)
}
