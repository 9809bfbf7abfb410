use super::*;
use rand::Rng;

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

fn tiny() -> Denoiser {
    Denoiser::new(DenoiserConfig::tiny()).unwrap()
}

/// Random parameters with every zero-initialized layer switched on.
fn live_params(d: &Denoiser, seed: u64) -> ParameterStore<f64> {
    let mut p = d.init_params::<f64>(seed);
    p.perturb(0.2, &mut ChaCha8Rng::seed_from_u64(seed + 1));
    p
}

fn latent(d: &Denoiser, seed: u64) -> Tensor<f64> {
    let c = d.config();
    rand_tensor(&[c.frames, c.latent_channels, c.latent_size, c.latent_size], seed)
}

fn cond(d: &Denoiser, seed: u64) -> ConditionBundle<f64> {
    let c = d.config();
    let img = [c.latent_channels, c.latent_size, c.latent_size];
    ConditionBundle {
        fg_image: rand_tensor(&img, seed),
        bg_latent: rand_tensor(&img, seed + 1).map(|x| 0.3 * x),
        pose_heatmaps: Some(
            rand_tensor(&[c.frames, c.keypoints, c.latent_size, c.latent_size], seed + 2).map(|x| 0.5 * (x + 1.0)),
        ),
    }
}

fn max_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.max_abs_diff(b)
}

fn count(cfg: DenoiserConfig) -> usize {
    Denoiser::new(cfg)
        .unwrap()
        .param_specs()
        .iter()
        .map(ParamSpec::numel)
        .sum()
}

#[test]
fn config_validation() {
    assert!(DenoiserConfig::default().validate().is_ok());
    assert!(DenoiserConfig::tiny().validate().is_ok());
    let bad_heads = DenoiserConfig {
        heads: 3,
        ..DenoiserConfig::default()
    };
    assert!(matches!(bad_heads.validate(), Err(Error::Param { .. })));
    let bad_size = DenoiserConfig {
        latent_size: 30,
        ..DenoiserConfig::default()
    };
    assert!(bad_size.validate().is_err());
    let bad_tokens = DenoiserConfig {
        fg_tokens: 3,
        ..DenoiserConfig::default()
    };
    assert!(bad_tokens.validate().is_err());
}

#[test]
fn parameter_sharing_counts() {
    for base in [DenoiserConfig::tiny(), DenoiserConfig::default()] {
        let single = count(DenoiserConfig {
            modality_embedding: false,
            ..base.clone()
        });
        let joint = count(base.clone());
        assert_eq!(joint, single + 2 * base.cond_dim);
        let separate = count(DenoiserConfig {
            sharing: Sharing::Separate,
            ..base.clone()
        });
        assert_eq!(separate, 2 * single);
    }
}

#[test]
fn names_are_unique_and_init_matches_specs() {
    let d = tiny();
    let specs = d.param_specs();
    let mut names: Vec<&str> = specs.iter().map(|s| s.name.as_str()).collect();
    names.sort();
    names.dedup();
    assert_eq!(names.len(), specs.len());
    let p = d.init_params::<f32>(3);
    p.validate(&specs).unwrap();
    assert_eq!(p.len(), specs.len());
    assert_eq!(d.init_params::<f32>(3), p);
}

#[test]
fn zero_initialized_layers() {
    let d = tiny();
    let p = d.init_params::<f64>(0);
    for (name, t) in p.iter() {
        let zero_out = name.contains("cross_modal.out")
            || name.contains("temporal.out")
            || name.contains("temporal_conv")
            || name.starts_with("pose.zero");
        if zero_out {
            assert!(t.data().iter().all(|&x| x == 0.0), "{name} should be zero");
        }
    }
}

#[test]
fn output_shape_and_determinism() {
    let d = tiny();
    let p = live_params(&d, 1);
    let z = latent(&d, 2);
    let c = cond(&d, 3);
    let opts = ForwardOptions::default();
    let (a, _) = d.single_forward(&z, 7, ModalityLabel::Video, &c, &p, &opts).unwrap();
    let (b, _) = d.single_forward(&z, 7, ModalityLabel::Video, &c, &p, &opts).unwrap();
    assert_eq!(a.shape(), z.shape());
    assert_eq!(a, b);
    assert!(a.all_finite());
    // a patchified configuration keeps the contract too
    let dp = Denoiser::new(DenoiserConfig {
        patch_size: 2,
        ..DenoiserConfig::tiny()
    })
    .unwrap();
    let pp = live_params(&dp, 1);
    let (e, _) = dp.single_forward(&z, 3, ModalityLabel::Depth, &c, &pp, &opts).unwrap();
    assert_eq!(e.shape(), z.shape());
}

#[test]
fn wrong_shapes_are_rejected() {
    let d = tiny();
    let p = d.init_params::<f64>(0);
    let c = cond(&d, 3);
    let bad = rand_tensor(&[2, 3, 4, 4], 0);
    let opts = ForwardOptions::default();
    assert!(matches!(
        d.single_forward(&bad, 0, ModalityLabel::Video, &c, &p, &opts),
        Err(Error::Shape { .. })
    ));
    let z = latent(&d, 1);
    let z3 = rand_tensor(&[3, 3, 8, 8], 0);
    assert!(d.joint_forward(&z, &z3, 0, &c, &p, &opts).is_err());
    let mut missing = p.clone();
    let mut partial = ParameterStore::new();
    for (n, t) in missing.iter_mut().skip(1) {
        partial.insert(n, t.clone());
    }
    assert!(matches!(
        d.single_forward(&z, 0, ModalityLabel::Video, &c, &partial, &opts),
        Err(Error::MissingParam(_))
    ));
}

#[test]
fn embedding_properties() {
    let d = tiny();
    let e = d.config().cond_dim;
    let base = sinusoidal_embedding(0.0, e);
    for (j, v) in base.iter().enumerate() {
        assert_eq!(*v, if j % 2 == 0 { 0.0 } else { 1.0 });
    }
    let p = live_params(&d, 5);
    let ev = d.embed_timestep_modality(9, ModalityLabel::Video, &p).unwrap();
    let ed = d.embed_timestep_modality(9, ModalityLabel::Depth, &p).unwrap();
    let table = p.get("modality_embed").unwrap();
    for j in 0..e {
        let want = table.data()[j] - table.data()[e + j];
        assert!((ev.data()[j] - ed.data()[j] - want).abs() < 1e-12);
    }
    let mut z = p.clone();
    z.get_mut("modality_embed").unwrap().data_mut().fill(0.0);
    let ev = d.embed_timestep_modality(9, ModalityLabel::Video, &z).unwrap();
    let ed = d.embed_timestep_modality(9, ModalityLabel::Depth, &z).unwrap();
    assert_eq!(ev, ed);
}

#[test]
fn background_latent_examples() {
    let z = Tensor::<f64>::from_f64(&[2, 1, 1, 1], &[0.25, 0.5]).unwrap();
    let bg = Tensor::<f64>::from_f64(&[1, 1, 1], &[-0.25]).unwrap();
    let out = add_background_latent(&z, &bg).unwrap();
    assert_eq!(out.data(), &[0.0, 0.25]);
    let zero_bg = Tensor::<f64>::zeros(&[1, 1, 1]);
    assert_eq!(add_background_latent(&z, &zero_bg).unwrap(), z);
    let b = rand_tensor(&[3, 4, 4], 1);
    let out = add_background_latent(&Tensor::zeros(&[3, 3, 4, 4]), &b).unwrap();
    for f in 0..3 {
        assert_eq!(out.slice_leading(f, 1).unwrap().into_data(), b.data());
    }
    assert!(add_background_latent(&z, &Tensor::zeros(&[1, 2, 1])).is_err());
}

#[test]
fn flipping_modality_changes_output() {
    let d = tiny();
    let p = live_params(&d, 4);
    let z = latent(&d, 5);
    let c = cond(&d, 6);
    let opts = ForwardOptions::default();
    let (a, _) = d.single_forward(&z, 4, ModalityLabel::Video, &c, &p, &opts).unwrap();
    let (b, _) = d.single_forward(&z, 4, ModalityLabel::Depth, &c, &p, &opts).unwrap();
    assert!(max_diff(&a, &b) > 0.0);
}

#[test]
fn pose_adapter_zero_init_and_zero_input() {
    let d = tiny();
    let c = d.config().clone();
    let pose = rand_tensor(&[c.frames, c.keypoints, c.latent_size, c.latent_size], 1);
    let fresh = d.init_params::<f64>(2);
    let res = d.pose_adapter_forward(&pose, 3, ModalityLabel::Video, &fresh).unwrap();
    assert_eq!(res.len(), c.num_up_blocks());
    for (n, r) in res.iter().enumerate() {
        let (dn, hn, wn) = c.up_block_dims(n);
        assert_eq!(r.shape(), &[c.frames, dn, hn, wn]);
        assert!(r.data().iter().all(|&x| x == 0.0));
    }
    let mut p = live_params(&d, 3);
    for (name, t) in p.iter_mut() {
        if name.starts_with("pose.") && name.ends_with(".bias") {
            t.data_mut().fill(0.0);
        }
    }
    let zero = Tensor::zeros(pose.shape());
    let res = d.pose_adapter_forward(&zero, 3, ModalityLabel::Video, &p).unwrap();
    assert!(res.iter().all(|r| r.data().iter().all(|&x| x == 0.0)));
    let res = d.pose_adapter_forward(&pose, 3, ModalityLabel::Video, &p).unwrap();
    assert!(res.iter().any(|r| r.data().iter().any(|&x| x != 0.0)));
}

#[test]
fn pose_heatmaps_reach_the_output_once_adapter_is_live() {
    let d = tiny();
    let p = live_params(&d, 8);
    let z = latent(&d, 1);
    let mut c = cond(&d, 2);
    let opts = ForwardOptions::default();
    let (a, _) = d.single_forward(&z, 5, ModalityLabel::Video, &c, &p, &opts).unwrap();
    c.pose_heatmaps.as_mut().unwrap().data_mut()[17] += 0.5;
    let (b, _) = d.single_forward(&z, 5, ModalityLabel::Video, &c, &p, &opts).unwrap();
    assert!(max_diff(&a, &b) > 0.0);
}

#[test]
fn identical_streams_with_zero_table_give_identical_outputs() {
    let d = tiny();
    let mut p = live_params(&d, 9);
    p.get_mut("modality_embed").unwrap().data_mut().fill(0.0);
    let z = latent(&d, 1);
    let c = cond(&d, 2);
    let out = d.joint_forward(&z, &z, 11, &c, &p, &ForwardOptions::default()).unwrap();
    assert_eq!(out.eps_video, out.eps_depth);
}

#[test]
fn decoupled_joint_equals_single() {
    let d = tiny();
    let p = live_params(&d, 10);
    let zv = latent(&d, 1);
    let zd = latent(&d, 2);
    let c = cond(&d, 3);
    let opts = ForwardOptions {
        couple_streams: false,
        ..ForwardOptions::default()
    };
    let j = d.joint_forward(&zv, &zd, 6, &c, &p, &opts).unwrap();
    let (sv, _) = d.single_forward(&zv, 6, ModalityLabel::Video, &c, &p, &opts).unwrap();
    let (sd, _) = d.single_forward(&zd, 6, ModalityLabel::Depth, &c, &p, &opts).unwrap();
    assert_eq!(j.eps_video, sv);
    assert_eq!(j.eps_depth, sd);
}

#[test]
fn coupling_sensitivity() {
    let d = tiny();
    let p = live_params(&d, 11);
    let zv = latent(&d, 1);
    let zd = latent(&d, 2);
    let c = cond(&d, 3);
    let mut zd2 = zd.clone();
    zd2.data_mut()[5] += 0.5;
    let opts = ForwardOptions::default();
    let a = d.joint_forward(&zv, &zd, 6, &c, &p, &opts).unwrap();
    let b = d.joint_forward(&zv, &zd2, 6, &c, &p, &opts).unwrap();
    assert!(max_diff(&a.eps_video, &b.eps_video) > 0.0);
    let off = ForwardOptions {
        couple_streams: false,
        ..opts
    };
    let a = d.joint_forward(&zv, &zd, 6, &c, &p, &off).unwrap();
    let b = d.joint_forward(&zv, &zd2, 6, &c, &p, &off).unwrap();
    assert_eq!(a.eps_video, b.eps_video);
}

#[test]
fn frames_are_independent_without_temporal_layers() {
    let d = Denoiser::new(DenoiserConfig {
        frames: 3,
        ..DenoiserConfig::tiny().without_video_layers()
    })
    .unwrap();
    let p = live_params(&d, 12);
    let z = latent(&d, 1);
    let mut c = cond(&d, 2);
    c.pose_heatmaps = None;
    let opts = ForwardOptions::default();
    let (a, _) = d.single_forward(&z, 3, ModalityLabel::Video, &c, &p, &opts).unwrap();
    let mut z2 = z.clone();
    let per = z.len() / 3;
    for v in &mut z2.data_mut()[per..2 * per] {
        *v += 0.3;
    }
    let (b, _) = d.single_forward(&z2, 3, ModalityLabel::Video, &c, &p, &opts).unwrap();
    for f in 0..3 {
        let da = a.slice_leading(f, 1).unwrap();
        let db = b.slice_leading(f, 1).unwrap();
        if f == 1 {
            assert!(max_diff(&da, &db) > 0.0);
        } else {
            assert_eq!(da, db, "frame {f} changed");
        }
    }
    // with temporal layers switched on, the perturbation leaks across frames
    let dt = Denoiser::new(DenoiserConfig {
        frames: 3,
        cross_modal: false,
        ..DenoiserConfig::tiny()
    })
    .unwrap();
    let pt = live_params(&dt, 12);
    let (a, _) = dt.single_forward(&z, 3, ModalityLabel::Video, &c, &pt, &opts).unwrap();
    let (b, _) = dt.single_forward(&z2, 3, ModalityLabel::Video, &c, &pt, &opts).unwrap();
    assert!(max_diff(&a.slice_leading(0, 1).unwrap(), &b.slice_leading(0, 1).unwrap()) > 0.0);
}

#[test]
fn taps_shapes_and_row_sums() {
    let d = tiny();
    let cfg = d.config().clone();
    let p = live_params(&d, 13);
    let opts = ForwardOptions {
        capture_taps: true,
        ..ForwardOptions::default()
    };
    let out = d
        .joint_forward(&latent(&d, 1), &latent(&d, 2), 2, &cond(&d, 3), &p, &opts)
        .unwrap();
    for taps in [out.taps_video.unwrap(), out.taps_depth.unwrap()] {
        assert_eq!(taps.blocks.len(), cfg.num_up_blocks());
        for (n, b) in taps.blocks.iter().enumerate() {
            let (dn, hn, wn) = cfg.up_block_dims(n);
            assert_eq!(b.self_attn_feat.shape(), &[cfg.frames, dn, hn, wn]);
            assert_eq!(b.xattn_map.shape(), &[cfg.frames, cfg.heads, hn * wn, cfg.fg_tokens]);
            for row in b.xattn_map.data().chunks(cfg.fg_tokens) {
                assert!(row.iter().all(|&x| x >= 0.0));
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-5);
            }
        }
    }
    let (_, none) = d
        .single_forward(&latent(&d, 1), 2, ModalityLabel::Video, &cond(&d, 3), &p, &ForwardOptions::default())
        .unwrap();
    assert!(none.is_none());
}

#[test]
fn shared_maps_make_taps_equal() {
    let d = tiny();
    let p = live_params(&d, 14);
    for mode in [XattnShareMode::ShareAvg, XattnShareMode::ShareVideo] {
        let opts = ForwardOptions {
            capture_taps: true,
            xattn_share: mode,
            ..ForwardOptions::default()
        };
        let out = d
            .joint_forward(&latent(&d, 1), &latent(&d, 2), 2, &cond(&d, 3), &p, &opts)
            .unwrap();
        let (tv, td) = (out.taps_video.unwrap(), out.taps_depth.unwrap());
        for (a, b) in tv.blocks.iter().zip(&td.blocks) {
            assert_eq!(a.xattn_map, b.xattn_map);
        }
    }
}

fn hand_store(wq: f64, wk: f64, wv: f64, wo: f64) -> ParameterStore<f64> {
    let mut p = ParameterStore::new();
    for (n, w) in [("q", wq), ("k", wk), ("v", wv), ("out", wo)] {
        p.insert(format!("cm.{n}.weight"), Tensor::from_f64(&[1, 1], &[w]).unwrap());
    }
    p.insert("cm.out.bias", Tensor::zeros(&[1]));
    p
}

#[test]
fn cross_modal_attention_two_token_hand_example() {
    let p = hand_store(1.0, 1.0, 1.0, 1.0);
    let tv = Tensor::from_f64(&[1, 1], &[1.0]).unwrap();
    let td = Tensor::from_f64(&[1, 1], &[2.0]).unwrap();
    let out = cross_modal_attention(&[&tv, &td], &p, "cm", 1).unwrap();
    // query 1: scores [1, 2]; query 2: scores [2, 4]
    let a1 = 1.0 / (1.0 + 1f64.exp());
    let v_out = a1 * 1.0 + (1.0 - a1) * 2.0;
    let a2 = 1.0 / (1.0 + 2f64.exp());
    let d_out = a2 * 1.0 + (1.0 - a2) * 2.0;
    assert!((out[0].data()[0] - (1.0 + v_out)).abs() < 1e-12);
    assert!((out[1].data()[0] - (2.0 + d_out)).abs() < 1e-12);
}

#[test]
fn cross_modal_attention_symmetry_and_single_set() {
    let mut p = ParameterStore::new();
    let d = 4;
    for (i, n) in ["q", "k", "v", "out"].iter().enumerate() {
        p.insert(format!("cm.{n}.weight"), rand_tensor(&[d, d], i as u64));
    }
    p.insert("cm.norm.weight", Tensor::full(&[d], 1.0));
    p.insert("cm.norm.bias", Tensor::zeros(&[d]));
    let t = rand_tensor(&[5, d], 9);
    let out = cross_modal_attention(&[&t, &t], &p, "cm", 2).unwrap();
    assert_eq!(out[0], out[1]);
    let single = cross_modal_attention(&[&t], &p, "cm", 2).unwrap();
    // duplicated keys leave the attention output unchanged
    assert!(max_diff(&single[0], &out[0]) < 1e-12);
    assert!(cross_modal_attention(&[&t, &rand_tensor(&[4, d], 1)], &p, "cm", 2).is_err());
}

#[test]
fn gradients_match_finite_differences() {
    let d = tiny();
    let p = live_params(&d, 15);
    let zv = latent(&d, 1);
    let zd = latent(&d, 2);
    let c = cond(&d, 3);
    let rv = latent(&d, 4);
    let rd = latent(&d, 5);
    let head = |store: &ParameterStore<f64>, grads: bool| -> (f64, Option<Vec<(String, Tensor<f64>)>>) {
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, store, |_| true);
        let cv = CondVars::constants(&mut g, &c);
        let a = g.constant(zv.clone());
        let b = g.constant(zd.clone());
        let out = d.forward_graph(
            &mut g,
            &vars,
            &[(a, ModalityLabel::Video), (b, ModalityLabel::Depth)],
            4,
            &cv,
            &ForwardOptions::default(),
        );
        let (wv, wd) = (g.constant(rv.clone()), g.constant(rd.clone()));
        let hv = g.mul(out[0].eps, wv);
        let hd = g.mul(out[1].eps, wd);
        let s = g.add(hv, hd);
        let s = g.sum(s);
        let f = g.value(s).item();
        if !grads {
            return (f, None);
        }
        let gr = g.backward(s);
        let list = vars
            .iter()
            .map(|(n, v)| (n.to_string(), gr.get(v).cloned().unwrap_or_else(|| Tensor::zeros(g.shape(v)))))
            .collect();
        (f, Some(list))
    };
    let (_, grads) = head(&p, true);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let h = 1e-5;
    let mut worst = 0.0f64;
    for (name, analytic) in grads.unwrap() {
        for _ in 0..2 {
            let k = rng.gen_range(0..analytic.len());
            let bump = |delta: f64| {
                let mut q = p.clone();
                q.get_mut(&name).unwrap().data_mut()[k] += delta;
                head(&q, false).0
            };
            let num = (bump(h) - bump(-h)) / (2.0 * h);
            let an = analytic.data()[k];
            let rel = (an - num).abs() / an.abs().max(num.abs()).max(1e-7);
            assert!(rel < 1e-4, "{name}[{k}]: analytic {an} vs numeric {num}");
            worst = worst.max(rel);
        }
    }
    assert!(worst < 1e-4);
}
