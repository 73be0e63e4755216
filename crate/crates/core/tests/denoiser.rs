use proptest::prelude::*;
use rawdiff::denoiser::*;
use rawdiff::diffusion::X0Predictor;
use rawdiff::rng::seeded;
use rawdiff::tensor::{grad_check, GraphBuilder, ParamStore, Tensor};

fn small(uncond: bool) -> DenoiserConfig {
    DenoiserConfig {
        base_channels: 4,
        depth: 1,
        blocks_per_level: 1,
        cond_dim: 6,
        time_embed_dim: 4,
        patch_size: 8,
        uncond,
    }
}

/// Replaces every zero-initialised tensor with noise so all paths carry signal.
fn randomised(params: &ParamStore, seed: u64) -> ParamStore {
    let mut out = params.clone();
    let mut rng = seeded(seed);
    let names: Vec<String> = out.names().map(String::from).collect();
    for name in names {
        let t = out.get_mut(&name).unwrap();
        if t.data().iter().all(|v| *v == 0.0) {
            *t = Tensor::randn(t.shape().to_vec(), 0.3, &mut rng);
        }
    }
    out
}

fn inputs(n: usize, h: usize, w: usize, cond_dim: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut rng = seeded(seed);
    (
        Tensor::randn([n, 4, h, w], 1.0, &mut rng),
        Tensor::randn([n, 4, h, w], 0.5, &mut rng),
        Tensor::randn([n, cond_dim], 1.0, &mut rng),
    )
}

#[test]
fn fresh_network_predicts_zero_with_the_input_shape() {
    let model = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
    let (x, y, c) = inputs(2, 16, 24, COND_DIM, 1);
    let out = model.predict_x0_batch(&x, &y, &[3, 700], Some(&c)).unwrap();
    assert_eq!(out.shape(), x.shape());
    assert!(out.data().iter().all(|v| *v == 0.0));
}

#[test]
fn randomised_network_is_finite_and_shape_preserving() {
    for (depth, h, w) in [(1, 2, 4), (2, 4, 8), (3, 8, 8)] {
        let cfg = DenoiserConfig {
            depth,
            patch_size: 2 << depth,
            ..small(false)
        };
        let mut model = Denoiser::new(cfg, 3).unwrap();
        model.params = randomised(&model.params, 4);
        let (x, y, c) = inputs(3, h, w, 6, 5);
        let out = model.predict_x0_batch(&x, &y, &[1, 2, 3], Some(&c)).unwrap();
        assert_eq!(out.shape(), x.shape());
        assert!(out.all_finite());
        assert!(out.data().iter().any(|v| *v != 0.0));
    }
}

#[test]
fn extents_must_divide_by_the_depth() {
    let model = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
    let (x, y, c) = inputs(1, 6, 8, COND_DIM, 0);
    assert!(model.predict_x0_batch(&x, &y, &[1], Some(&c)).is_err());
    assert!(model.config.check_extents(8, 12).is_ok());
    assert!(model.config.check_extents(0, 4).is_err());
}

#[test]
fn conditioned_model_requires_a_matching_condition() {
    let model = Denoiser::new(small(false), 0).unwrap();
    let (x, y, _) = inputs(1, 4, 4, 6, 0);
    assert!(model.predict_x0(&x, &y, 1, None).is_err());
    let wrong = Tensor::zeros([1, 5]);
    assert!(model.predict_x0(&x, &y, 1, Some(&wrong)).is_err());
    assert!(model.predict_x0_batch(&x, &y, &[1, 2], None).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    // 12 channels keep two channels per norm group; with one channel per
    // group the pre-norm biases would have exactly zero gradient.
    for uncond in [false, true] {
        let cfg = DenoiserConfig {
            base_channels: 12,
            ..small(uncond)
        };
        let mut params = randomised(&init_params(&cfg, 7).unwrap(), 8);
        let (mut b, out) = build_into(GraphBuilder::new(), &cfg, &params, 4, 4, GraphOptions::default()).unwrap();
        let r = b.param("probe");
        let weighted = b.mul(out, r);
        let loss = b.sum(weighted);
        params.insert("probe", Tensor::randn([2, 4, 4, 4], 1.0, &mut seeded(10)), false);
        let (x, y, c) = inputs(2, 4, 4, 6, 9);
        let temb = timestep_batch(&[5, 60], 4);
        let mut feed = vec![("x_t", &x), ("y", &y), ("temb", &temb)];
        if !uncond {
            feed.push(("cond", &c));
        }
        let worst = grad_check(&b.build(), &feed, &params, loss, 1e-5).unwrap();
        assert!(worst < 1e-4, "uncond {uncond}: worst relative error {worst}");
    }
}

fn silu(v: f64) -> f64 {
    v / (1.0 + (-v).exp())
}

/// `x W^T + b` for a single row.
fn fc(p: &ParamStore, name: &str, x: &[f64]) -> Vec<f64> {
    let w = p.require(&format!("{name}.weight")).unwrap();
    let b = p.require(&format!("{name}.bias")).unwrap();
    let (o, i) = (w.shape()[0], w.shape()[1]);
    (0..o)
        .map(|r| b.data()[r] + (0..i).map(|k| w.data()[r * i + k] * x[k]).sum::<f64>())
        .collect()
}

fn mlp(p: &ParamStore, prefix: &str, x: &[f64]) -> Vec<f64> {
    let h: Vec<f64> = fc(p, &format!("{prefix}.fc1"), x).into_iter().map(silu).collect();
    fc(p, &format!("{prefix}.fc2"), &h)
}

#[test]
fn modulation_is_the_sum_of_time_and_condition_embeddings() {
    let mut model = Denoiser::new(small(false), 11).unwrap();
    model.params = randomised(&model.params, 12);
    let g = model.graph(4, 4, false).unwrap();
    let node = g.graph.labelled("modulation").unwrap();
    let (x, y, c) = inputs(2, 4, 4, 6, 13);
    let ts = [17, 400];
    let temb = timestep_batch(&ts, 4);
    let fwd = g.graph.eval(&model.feed(&x, &y, &temb, Some(&c)), &model.params).unwrap();
    let got = fwd.value(node);
    for (n, &t) in ts.iter().enumerate() {
        let te = mlp(&model.params, "time", &timestep_encoding(t as f64, 4));
        let ce = mlp(&model.params, "cond", &c.data()[n * 6..(n + 1) * 6]);
        for k in 0..4 {
            assert!((got.data()[n * 4 + k] - (te[k] + ce[k])).abs() < 1e-12);
        }
    }
}

#[test]
fn prediction_depends_on_time_and_condition() {
    let mut model = Denoiser::new(small(false), 14).unwrap();
    model.params = randomised(&model.params, 15);
    let (x, y, c) = inputs(1, 4, 4, 6, 16);
    let base = model.predict_x0(&x, &y, 10, Some(&c)).unwrap();
    assert_ne!(base, model.predict_x0(&x, &y, 11, Some(&c)).unwrap());
    let other = c.map(|v| -v);
    assert_ne!(base, model.predict_x0(&x, &y, 10, Some(&other)).unwrap());

    let mut silent = model.clone();
    let names: Vec<String> = silent.params.names().filter(|n| n.ends_with(".emb.weight")).map(String::from).collect();
    for n in &names {
        let t = silent.params.get_mut(n).unwrap();
        *t = Tensor::zeros(t.shape().to_vec());
    }
    let a = silent.predict_x0(&x, &y, 10, Some(&c)).unwrap();
    let b = silent.predict_x0(&x, &y, 900, Some(&other)).unwrap();
    assert_eq!(a, b);
}

#[test]
fn unconditioned_variant_adds_one_null_vector() {
    let cond = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
    let uncond = Denoiser::new(DenoiserConfig { uncond: true, ..DenoiserConfig::default() }, 0).unwrap();
    assert_eq!(uncond.params.total_count() - cond.params.total_count(), COND_DIM);
    assert_eq!(uncond.params.require(NULL_COND).unwrap().shape(), &[1, COND_DIM]);
    assert!(!cond.params.contains(NULL_COND));

    let (x, y, c) = inputs(1, 8, 8, COND_DIM, 1);
    let mut m = uncond.clone();
    m.params = randomised(&m.params, 2);
    let ignored = m.predict_x0(&x, &y, 5, Some(&c)).unwrap();
    assert_eq!(ignored, m.predict_x0(&x, &y, 5, None).unwrap());
}

#[test]
fn timestep_encodings_are_distinct() {
    let enc: Vec<Vec<f64>> = (1..=1000).map(|t| timestep_encoding(t as f64, 128)).collect();
    let mut closest = f64::INFINITY;
    for i in 0..enc.len() {
        for j in i + 1..enc.len() {
            let d: f64 = enc[i].iter().zip(&enc[j]).map(|(a, b)| (a - b).powi(2)).sum();
            closest = closest.min(d);
        }
    }
    assert!(closest > 1e-3, "closest pair at squared distance {closest}");
}

#[test]
fn config_validation() {
    assert!(DenoiserConfig::default().validate().is_ok());
    for bad in [
        DenoiserConfig { patch_size: 30, ..DenoiserConfig::default() },
        DenoiserConfig { patch_size: 0, ..DenoiserConfig::default() },
        DenoiserConfig { time_embed_dim: 5, ..DenoiserConfig::default() },
        DenoiserConfig { base_channels: 0, ..DenoiserConfig::default() },
    ] {
        assert!(Denoiser::new(bad, 0).is_err());
    }
    let shapes = parameter_shapes(&DenoiserConfig::default()).unwrap();
    let model = Denoiser::new(DenoiserConfig::default(), 0).unwrap();
    assert_eq!(shapes.len(), model.params.len());
    let mut store = model.params.clone();
    store.remove("conv_in.weight");
    assert!(Denoiser::from_parts(DenoiserConfig::default(), store).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn initialisation_is_a_function_of_config_and_seed(seed in any::<u64>()) {
        let a = Denoiser::new(small(false), seed).unwrap();
        let b = Denoiser::new(small(false), seed).unwrap();
        let c = Denoiser::new(small(false), seed ^ 1).unwrap();
        for name in a.params.names() {
            prop_assert_eq!(a.params.get(name), b.params.get(name));
        }
        prop_assert_ne!(a.params.get("conv_in.weight"), c.params.get("conv_in.weight"));
        prop_assert_eq!(a.params.get("conv_out.weight"), c.params.get("conv_out.weight"));
    }

    #[test]
    fn group_count_divides_and_is_bounded(channels in 1usize..300) {
        let g = group_count(channels);
        prop_assert!(g >= 1 && g <= 8 && channels % g == 0);
    }
}
