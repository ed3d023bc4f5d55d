mod common;

use avatar_core::decoder::*;
use avatar_core::scene::Vec3;
use avatar_core::skinning::PositionalUvMap;
use common::*;
use proptest::prelude::*;
use rand::Rng;

fn toy_config() -> DecoderConfig {
    DecoderConfig {
        channels: 4,
        hidden: 7,
        skip_width: 9,
        head_width: 5,
        encoder_hidden: 6,
        ..Default::default()
    }
}

/// Decoder with every tensor (including the zero-initialised head outputs) random.
fn random_decoder(config: DecoderConfig, seed: u64) -> Decoder {
    let mut d = Decoder::new(config, seed).unwrap();
    let mut r = rng(seed + 100);
    for t in d.params.tensors_mut() {
        for v in t.iter_mut() {
            *v = r.gen_range(-0.6..0.6);
        }
    }
    d
}

fn random_features(r: &mut impl Rng, w: usize, h: usize, c: usize) -> FeatureMap {
    let mut f = FeatureMap::zeros(w, h, c);
    f.data.iter_mut().for_each(|v| *v = r.gen_range(-1.0..1.0));
    f
}

fn lrelu(v: f64) -> f64 {
    if v > 0.0 {
        v
    } else {
        0.01 * v
    }
}

fn dense(l: &Linear, x: &[f64]) -> Vec<f64> {
    (0..l.output())
        .map(|o| l.bias[o] + (0..l.input()).map(|i| l.weight[[o, i]] * x[i]).sum::<f64>())
        .collect()
}

/// Straight-line evaluation of one texel from the documented layer layout.
fn reference_texel(d: &Decoder, x: &[f64]) -> [[f64; 3]; 4] {
    let p = &d.params;
    let mut h = x.to_vec();
    for (l, layer) in p.trunk.iter().enumerate() {
        let input: Vec<f64> = if l == 3 { h.iter().chain(x).copied().collect() } else { h.clone() };
        h = dense(layer, &input).into_iter().map(lrelu).collect();
    }
    let c = &d.config;
    let mut out = [[0.0; 3]; 4];
    for k in 0..4 {
        let a: Vec<f64> = dense(&p.heads[k][0], &h).into_iter().map(lrelu).collect();
        let raw = dense(&p.heads[k][1], &a);
        for j in 0..3 {
            let sig = 1.0 / (1.0 + (-raw[j]).exp());
            out[k][j] = match k {
                0 => c.offset_bound * raw[j].tanh(),
                1 => c.normal_offset_bound * raw[j].tanh(),
                2 => sig,
                _ => c.max_scale * sig,
            };
        }
    }
    out
}

fn rows(a: &GaussianAttributes, k: usize) -> [[f64; 3]; 4] {
    let v = |x: &Vec3| [x.x, x.y, x.z];
    [v(&a.offsets[k]), v(&a.normal_offsets[k]), v(&a.colors[k]), v(&a.scales[k])]
}

fn all_texels(w: usize, h: usize) -> Vec<[u32; 2]> {
    (0..h).flat_map(|j| (0..w).map(move |i| [i as u32, j as u32])).collect()
}

#[test]
fn forward_matches_reference_evaluation() {
    let d = random_decoder(DecoderConfig::default(), 1);
    let mut r = rng(2);
    let s = random_features(&mut r, 5, 4, 32);
    let p = random_features(&mut r, 5, 4, 32);
    let texels = all_texels(5, 4);
    let (a1, _) = d.decode_stage1(&s, &texels).unwrap();
    let (a2, _) = d.decode_stage2(&s, &p, &texels).unwrap();
    for (k, &[i, j]) in texels.iter().enumerate() {
        let st = s.texel(i as usize, j as usize);
        let pt = p.texel(i as usize, j as usize);
        let x1: Vec<f64> = st.iter().chain(st).copied().collect();
        let x2: Vec<f64> = st.iter().chain(pt).copied().collect();
        for (want, got) in [(reference_texel(&d, &x1), rows(&a1, k)), (reference_texel(&d, &x2), rows(&a2, k))] {
            for h in 0..4 {
                for c in 0..3 {
                    assert!((want[h][c] - got[h][c]).abs() < 1e-6);
                }
            }
        }
    }
}

fn pos_map(r: &mut impl Rng, w: usize, h: usize) -> PositionalUvMap {
    PositionalUvMap {
        width: w,
        height: h,
        positions: (0..w * h).map(|_| Vec3::new(r.gen(), r.gen(), r.gen())).collect(),
        valid: vec![true; w * h],
        normals: Vec::new(),
        weights: None,
    }
}

#[test]
fn encoder_matches_reference_evaluation() {
    let d = random_decoder(DecoderConfig::default(), 3);
    let mut r = rng(4);
    let map = pos_map(&mut r, 4, 3);
    let norm = PositionNormalization {
        mean: [0.2, 0.1, -0.3],
        scale: 1.7,
    };
    let shape = FeatureMap::zeros(4, 3, 32);
    let texels = vec![[0, 0], [3, 1], [2, 2]];
    let (p, _) = d.encode_pose(&map, &norm, &texels, &shape).unwrap();
    for &[i, j] in &texels {
        let x = norm.apply(&map.positions[map.texel(i as usize, j as usize)]);
        let a: Vec<f64> = dense(&d.params.encoder[0], x.as_slice()).into_iter().map(lrelu).collect();
        let want: Vec<f64> = dense(&d.params.encoder[1], &a).into_iter().map(lrelu).collect();
        for (w, g) in want.iter().zip(p.texel(i as usize, j as usize)) {
            assert!((w - g).abs() < 1e-6);
        }
    }
    // Texels not listed stay zero.
    assert!(p.texel(1, 0).iter().all(|&v| v == 0.0));
    let bad = pos_map(&mut r, 3, 3);
    assert!(d.encode_pose(&bad, &norm, &texels, &shape).unwrap_err().is_validation());
}

fn random_upstream(r: &mut impl Rng, k: usize) -> GaussianAttributes {
    let mut g = GaussianAttributes::zeros(k);
    for v in [&mut g.offsets, &mut g.normal_offsets, &mut g.colors, &mut g.scales] {
        v.iter_mut().for_each(|x| *x = Vec3::new(r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0), r.gen_range(-1.0..1.0)));
    }
    g
}

fn inner(a: &GaussianAttributes, b: &GaussianAttributes) -> f64 {
    let d = |x: &Vec<Vec3>, y: &Vec<Vec3>| x.iter().zip(y).map(|(p, q)| p.dot(q)).sum::<f64>();
    d(&a.offsets, &b.offsets) + d(&a.normal_offsets, &b.normal_offsets) + d(&a.colors, &b.colors) + d(&a.scales, &b.scales)
}

/// Full chain used for finite differences: encoder -> decoder(S, P) (or S, S).
fn objective(d: &Decoder, s: &FeatureMap, map: &PositionalUvMap, texels: &[[u32; 2]], up: &GaussianAttributes, stage2: bool) -> f64 {
    let norm = PositionNormalization { mean: [0.0; 3], scale: 1.0 };
    let out = if stage2 {
        let (p, _) = d.encode_pose(map, &norm, texels, s).unwrap();
        d.decode_stage2(s, &p, texels).unwrap().0
    } else {
        d.decode_stage1(s, texels).unwrap().0
    };
    inner(&out, up)
}

fn check_all_gradients(stage2: bool) {
    let mut d = random_decoder(toy_config(), 5);
    let mut r = rng(6);
    let mut s = random_features(&mut r, 2, 2, 4);
    let map = pos_map(&mut r, 2, 2);
    let texels = all_texels(2, 2);
    let up = random_upstream(&mut r, 4);
    let norm = PositionNormalization { mean: [0.0; 3], scale: 1.0 };

    let (grads, d_s) = if stage2 {
        let (p, enc) = d.encode_pose(&map, &norm, &texels, &s).unwrap();
        let (out, cache) = d.decode_stage2(&s, &p, &texels).unwrap();
        let mut g = d.backward(&cache, &out, &up, &s).unwrap();
        let d_p = g.d_p.clone().expect("stage 2 yields P gradients");
        d.encoder_backward(&enc, &d_p, &mut g.params).unwrap();
        (g.params, g.d_s)
    } else {
        let (out, cache) = d.decode_stage1(&s, &texels).unwrap();
        let g = d.backward(&cache, &out, &up, &s).unwrap();
        assert!(g.d_p.is_none());
        (g.params, g.d_s)
    };

    let h = 1e-4;
    let analytic: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, _, v)| v.to_vec()).collect();
    let names: Vec<String> = grads.tensors().iter().map(|(n, _, _)| n.clone()).collect();
    let mut checked = 0;
    for (t, name) in names.iter().enumerate() {
        let len = analytic[t].len();
        for e in 0..len {
            let orig = d.params.tensors_mut()[t][e];
            d.params.tensors_mut()[t][e] = orig + h;
            let fp = objective(&d, &s, &map, &texels, &up, stage2);
            d.params.tensors_mut()[t][e] = orig - h;
            let fm = objective(&d, &s, &map, &texels, &up, stage2);
            d.params.tensors_mut()[t][e] = orig;
            let fd = (fp - fm) / (2.0 * h);
            let a = analytic[t][e];
            if !stage2 && name.starts_with("encoder") {
                assert_eq!(a, 0.0);
            }
            assert!(rel_err(a, fd, 1e-6) < 1e-4, "{name}[{e}]: {a} vs {fd}");
            checked += 1;
        }
    }
    assert_eq!(checked, d.param_count());
    for e in 0..s.data.len() {
        let orig = s.data[e];
        s.data[e] = orig + h;
        let fp = objective(&d, &s, &map, &texels, &up, stage2);
        s.data[e] = orig - h;
        let fm = objective(&d, &s, &map, &texels, &up, stage2);
        s.data[e] = orig;
        let fd = (fp - fm) / (2.0 * h);
        assert!(rel_err(d_s.data[e], fd, 1e-6) < 1e-4, "S[{e}]: {} vs {fd}", d_s.data[e]);
    }
}

#[test]
fn stage1_gradients_match_finite_differences() {
    check_all_gradients(false);
}

#[test]
fn stage2_gradients_match_finite_differences() {
    check_all_gradients(true);
}

#[test]
fn p_gradient_matches_finite_differences() {
    let d = random_decoder(toy_config(), 7);
    let mut r = rng(8);
    let s = random_features(&mut r, 2, 2, 4);
    let mut p = random_features(&mut r, 2, 2, 4);
    let texels = all_texels(2, 2);
    let up = random_upstream(&mut r, 4);
    let (out, cache) = d.decode_stage2(&s, &p, &texels).unwrap();
    let g = d.backward(&cache, &out, &up, &s).unwrap();
    let d_p = g.d_p.unwrap();
    for e in 0..p.data.len() {
        let orig = p.data[e];
        p.data[e] = orig + 1e-4;
        let fp = inner(&d.decode_stage2(&s, &p, &texels).unwrap().0, &up);
        p.data[e] = orig - 1e-4;
        let fm = inner(&d.decode_stage2(&s, &p, &texels).unwrap().0, &up);
        p.data[e] = orig;
        assert!(rel_err(d_p.data[e], (fp - fm) / 2e-4, 1e-6) < 1e-4);
    }
}

#[test]
fn zero_upstream_gives_zero_gradients() {
    let d = random_decoder(toy_config(), 9);
    let mut r = rng(10);
    let s = random_features(&mut r, 3, 3, 4);
    let texels = all_texels(3, 3);
    let (out, cache) = d.decode_stage1(&s, &texels).unwrap();
    let g = d.backward(&cache, &out, &GaussianAttributes::zeros(9), &s).unwrap();
    assert!(g.params.tensors().iter().all(|(_, _, v)| v.iter().all(|&x| x == 0.0)));
    assert!(g.d_s.data.iter().all(|&x| x == 0.0));
}

#[test]
fn stage2_with_p_equal_s_reproduces_stage1() {
    let d = random_decoder(DecoderConfig::default(), 11);
    let mut r = rng(12);
    let s = random_features(&mut r, 4, 4, 32);
    let texels = all_texels(4, 4);
    assert_eq!(d.decode_stage1(&s, &texels).unwrap().0, d.decode_stage2(&s, &s, &texels).unwrap().0);
}

#[test]
fn perturbing_one_texel_of_p_is_local() {
    let d = random_decoder(toy_config(), 13);
    let mut r = rng(14);
    let s = random_features(&mut r, 4, 4, 4);
    let mut p = random_features(&mut r, 4, 4, 4);
    let texels = all_texels(4, 4);
    let (a, _) = d.decode_stage2(&s, &p, &texels).unwrap();
    p.texel_mut(2, 1)[2] += 0.5;
    let (b, _) = d.decode_stage2(&s, &p, &texels).unwrap();
    for (k, &[i, j]) in texels.iter().enumerate() {
        let same = rows(&a, k) == rows(&b, k);
        assert_eq!(same, (i, j) != (2, 1), "texel ({i},{j})");
    }
}

#[test]
fn folding_preserves_stage1_and_detaches_second_half() {
    let mut d = random_decoder(DecoderConfig::default(), 15);
    let mut r = rng(16);
    let s = random_features(&mut r, 3, 3, 32);
    let p = random_features(&mut r, 3, 3, 32);
    let texels = all_texels(3, 3);
    let before = d.decode_stage1(&s, &texels).unwrap().0;
    d.params.fold_duplicate_input(32);
    let after = d.decode_stage1(&s, &texels).unwrap().0;
    let with_p = d.decode_stage2(&s, &p, &texels).unwrap().0;
    for k in 0..9 {
        for h in 0..4 {
            for c in 0..3 {
                assert!((rows(&before, k)[h][c] - rows(&after, k)[h][c]).abs() < 1e-12);
                assert!((rows(&before, k)[h][c] - rows(&with_p, k)[h][c]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn parameter_count_budget() {
    let c = DecoderConfig::default();
    let n = param_count(&c);
    assert!((158_100..=213_900).contains(&n), "{n}");
    // Shape arithmetic written out longhand.
    let trunk = (64 * 128 + 128) + 2 * (128 * 128 + 128) + (192 * 256 + 256) + (256 * 128 + 128)
        + 2 * (128 * 128 + 128) + (128 * 64 + 64);
    let heads = 4 * ((64 * 64 + 64) + (64 * 3 + 3));
    let encoder = (3 * 64 + 64) + (64 * 32 + 32);
    assert_eq!(n, trunk + heads + encoder);
    let wide = DecoderConfig { hidden: 256, ..c };
    assert!(param_count(&wide) > 2 * n - (heads + encoder));
    assert!(param_count(&wide) > n);
}

#[test]
fn canonical_features_initialisation() {
    let mut r = rng(17);
    let mut map = pos_map(&mut r, 8, 8);
    for k in (0..64).step_by(3) {
        map.valid[k] = false;
    }
    let (a, norm) = init_canonical_features(&map, 32, 5).unwrap();
    let (b, _) = init_canonical_features(&map, 32, 5).unwrap();
    let (c, _) = init_canonical_features(&map, 32, 6).unwrap();
    assert_eq!(a, b);
    let mut mean = [0.0; 3];
    let mut n = 0.0;
    for j in 0..8 {
        for i in 0..8 {
            let t = map.texel(i, j);
            let (fa, fc) = (a.texel(i, j), c.texel(i, j));
            if !map.valid[t] {
                assert!(fa.iter().all(|&v| v == 0.0));
                continue;
            }
            n += 1.0;
            for k in 0..3 {
                mean[k] += fa[k];
            }
            assert_eq!(fa[..3], fc[..3]);
            assert!(fa[3..] != fc[3..]);
            let p = norm.apply(&map.positions[t]);
            assert_eq!(fa[..3], [p.x, p.y, p.z]);
        }
    }
    for m in mean {
        assert!((m / n).abs() < 1e-6);
    }
    assert!(init_canonical_features(&map, 3, 5).is_err());
}

#[test]
fn checkpoint_round_trips_parameters() {
    let d = random_decoder(DecoderConfig::default(), 18);
    let mut ck = Checkpoint::new(serde_json::json!({}));
    for (name, dims, v) in d.params.tensors() {
        ck.push(name, dims, v);
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("d.avck");
    ck.save(&path, TensorDtype::F64).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    let mut e = Decoder::new(DecoderConfig::default(), 0).unwrap();
    for (t, (name, _, v)) in e.params.tensors_mut().into_iter().zip(d.params.tensors()) {
        t.copy_from_slice(&back.require(&name, v.len()).unwrap().data);
    }
    assert_eq!(e, d);
}

proptest! {
    #[test]
    fn outputs_are_bounded(seed in 0u64..500, amp in 0.1..50.0f64) {
        let d = random_decoder(toy_config(), seed);
        let mut r = rng(seed);
        let mut s = random_features(&mut r, 3, 3, 4);
        s.data.iter_mut().for_each(|v| *v *= amp);
        let (a, _) = d.decode_stage1(&s, &all_texels(3, 3)).unwrap();
        for k in 0..9 {
            for c in 0..3 {
                prop_assert!(a.offsets[k][c].abs() <= 0.1 && a.normal_offsets[k][c].abs() <= 0.1);
                prop_assert!((0.0..=1.0).contains(&a.colors[k][c]));
                prop_assert!(a.scales[k][c] > 0.0 && a.scales[k][c] <= 0.05);
            }
        }
    }

    #[test]
    fn forward_is_deterministic(seed in 0u64..100) {
        let a = Decoder::new(DecoderConfig::default(), seed).unwrap();
        let b = Decoder::new(DecoderConfig::default(), seed).unwrap();
        prop_assert_eq!(&a, &b);
        let mut r = rng(seed);
        let s = random_features(&mut r, 2, 2, 32);
        prop_assert_eq!(a.decode_stage1(&s, &all_texels(2, 2)).unwrap().0, b.decode_stage1(&s, &all_texels(2, 2)).unwrap().0);
    }
}
