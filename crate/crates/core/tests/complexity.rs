use forma_core::complexity::{complexity, flops_estimate, param_count, DEFAULT_FLOPS_PER_MAC};
use forma_core::{Forma, Graph, ModelConfig, Tensor, Variant};

fn instrumented_macs(cfg: &ModelConfig) -> u64 {
    let model = Forma::new(cfg.clone(), 3).unwrap();
    let (h, w) = cfg.input_size;
    let mut g = Graph::inference();
    let x = g.constant(Tensor::full(&[3, h, w], 0.5));
    model.forward(&mut g, x, None).unwrap();
    g.macs()
}

#[test]
fn analytic_macs_match_the_instrumented_forward() {
    for v in Variant::ALL {
        let cfg = ModelConfig::toy().with_variant(v);
        let r = complexity(&cfg, 64, 64, 1).unwrap();
        assert_eq!(r.macs, instrumented_macs(&cfg), "variant {v}");
    }
}

#[test]
fn analytic_params_match_the_store() {
    for v in Variant::ALL {
        let cfg = ModelConfig::toy().with_variant(v);
        let model = Forma::new(cfg.clone(), 0).unwrap();
        assert_eq!(param_count(&cfg).unwrap(), model.store.num_scalars() as u64, "variant {v}");
    }
    let paper = ModelConfig::paper();
    let model = Forma::new(paper.clone(), 0).unwrap();
    assert_eq!(param_count(&paper).unwrap(), model.store.num_scalars() as u64);
}

#[test]
fn toy_total_is_the_sum_of_hand_formulas() {
    // stage widths 16, 32, 64, 128; inner widths double those; N = 4; 64x64 input
    let (c, n, k) = (16usize, 4usize, 3usize);
    let block = |ci: usize| {
        let e = 2 * ci;
        let ssm = e * e + e + 2 * e * n + e * n + e;
        2 * ci + 2 * (ci * e + e) + (e * k * k + e) + 4 * ssm + 2 * e + (e * ci + ci)
    };
    let down = |ci: usize| 4 * ci * 2 * ci + 2 * ci + 2 * 2 * ci;
    let encoder = (3 * 16 * c + c + 2 * c)
        + block(16)
        + down(16)
        + block(32)
        + down(32)
        + 2 * block(64)
        + down(64)
        + block(128);
    let noise = 3 * 3 * 25
        + (3 * 8 * 9 + 8)
        + 2 * (8 * 8 * 9 + 8)
        + ((9 + 3 + 8) * 8 * 9 + 8)
        + (8 * 16 * 9 + 16)
        + 2 * 16;
    let decoder = (16 * 16 + 16)
        + (32 * 64 + 64)
        + (64 * 256 + 256)
        + (128 * 1024 + 1024)
        + ((4 * 16 + 16) * 16 + 16)
        + (16 * 2 + 2);
    assert_eq!(param_count(&ModelConfig::toy()).unwrap(), (encoder + noise + decoder) as u64);
}

#[test]
fn paper_scale_lands_in_the_published_band() {
    let cfg = ModelConfig::paper();
    let p = param_count(&cfg).unwrap() as f64 / 1e6;
    assert!((31.0..=43.0).contains(&p), "{p} M params");
    let f512 = flops_estimate(&cfg, 512, 512, DEFAULT_FLOPS_PER_MAC).unwrap() as f64;
    let f1024 = flops_estimate(&cfg, 1024, 1024, DEFAULT_FLOPS_PER_MAC).unwrap() as f64;
    assert!((34e9..=50e9).contains(&f512), "{f512}");
    let ratio = f1024 / f512;
    assert!((3.9..=4.2).contains(&ratio), "{ratio}");
}

#[test]
fn doubling_width_roughly_quadruples_dense_layers() {
    let base = ModelConfig::toy();
    let wide = ModelConfig {
        embed_dim: 2 * base.embed_dim,
        ..base.clone()
    };
    let dense = |cfg: &ModelConfig| -> u64 {
        complexity(cfg, 64, 64, 1)
            .unwrap()
            .layers
            .iter()
            .filter(|l| l.module == "encoder" && (l.name.ends_with("proj_in") || l.name.ends_with("proj_out")))
            .map(|l| l.params)
            .sum()
    };
    let ratio = dense(&wide) as f64 / dense(&base) as f64;
    assert!((3.8..=4.0).contains(&ratio), "{ratio}");
}

#[test]
fn noise_into_encoder_costs_more_than_full() {
    for base in [ModelConfig::toy(), ModelConfig::paper()] {
        let (h, w) = base.input_size;
        let full = flops_estimate(&base, h, w, 1).unwrap();
        let nie = flops_estimate(&base.clone().with_variant(Variant::NoiseIntoEncoder), h, w, 1).unwrap();
        assert!(nie > full);
    }
}

#[test]
fn flops_scale_with_the_configured_convention() {
    let cfg = ModelConfig::toy();
    let one = flops_estimate(&cfg, 64, 64, 1).unwrap();
    assert_eq!(flops_estimate(&cfg, 64, 64, 2).unwrap(), 2 * one);
}
