use avfuse::autodiff::graph::dropout_mask;
use avfuse::autodiff::{Checkpoint, Graph, ParamStore};
use avfuse::ctc::{collapse, ctc_loss_raw, CtcPrefixScorer, PosteriorGrid};
use avfuse::decoding::{joint_beam_search, rescore_components, BeamConfig, LmConfig, LstmLm};
use avfuse::functional::log_softmax;
use avfuse::fusion::stream_weight_fuse;
use avfuse::harness::eval::{SweepResult, SweepRow};
use avfuse::reliability::{assemble_reliability, estimate_snr_proxy, extract_audio_reliability, video_columns, ReliabilityStream, SNR_RANGE};
use avfuse::streams::{bresenham_align, mix_noise_at_snr, subsampled_len, FeatureFile};
use avfuse::tensor::Tensor;
use proptest::prelude::*;

fn lse(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn grid_from(rows: &[Vec<f64>]) -> Tensor<f64> {
    let normalised: Vec<Vec<f64>> = rows.iter().map(|r| log_softmax(r).unwrap()).collect();
    Tensor::from_rows(&normalised).unwrap()
}

fn logit_rows(frames: std::ops::RangeInclusive<usize>, vocab: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-4.0f64..4.0, vocab), frames)
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 96, ..ProptestConfig::default() })]

    #[test]
    fn log_softmax_rows_are_normalised(x in prop::collection::vec(-300.0f64..300.0, 1..40)) {
        let y = log_softmax(&x).unwrap();
        prop_assert!(lse(&y).abs() <= 1e-9);
        let mut g = Graph::<f64>::eval();
        let v = g.input(Tensor::matrix(1, x.len(), x.clone()));
        let out = g.log_softmax(v);
        prop_assert!(lse(g.value(out).data()).abs() <= 1e-9);
    }

    #[test]
    fn bresenham_map_is_monotone_and_covers_endpoints(src in 1usize..60, dst in 1usize..200) {
        let m = bresenham_align(src, dst).unwrap();
        prop_assert_eq!(m.map.len(), dst);
        prop_assert_eq!(m.map[0], 0);
        prop_assert!(m.map.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(m.map.iter().all(|&i| i < src));
        if dst > 1 || src == 1 {
            prop_assert_eq!(*m.map.last().unwrap(), src - 1);
        }
        if src == dst {
            prop_assert_eq!(m.map, (0..src).collect::<Vec<_>>());
        }
    }

    #[test]
    fn bresenham_integer_ratio_repeats_each_frame(src in 1usize..40, k in 1usize..6) {
        let m = bresenham_align(src, k * src).unwrap();
        for s in 0..src {
            prop_assert_eq!(m.map.iter().filter(|&&i| i == s).count(), k);
        }
    }

    #[test]
    fn reliability_assembly_matches_subsampled_length(n_v in 1usize..40, ratio in 1usize..6, extra in 0usize..4) {
        let n_a = (n_v * ratio + extra).max(4);
        let a = ReliabilityStream::new(Tensor::filled(&[n_a, 9], 0.5), avfuse::reliability::audio_columns(5)).unwrap();
        let v = ReliabilityStream::new(Tensor::filled(&[n_v, 7], 0.5), video_columns()).unwrap();
        let (ra, rv) = assemble_reliability(&a, &v, n_a, n_v).unwrap();
        prop_assert_eq!(ra.len(), subsampled_len(n_a));
        prop_assert_eq!(rv.len(), subsampled_len(n_a));
    }

    #[test]
    fn noise_mixing_is_scale_covariant(
        clean in prop::collection::vec(-1.0f64..1.0, 64..200),
        c in 0.1f64..10.0,
        snr in -12.0f64..12.0,
        seed in any::<u64>(),
    ) {
        prop_assume!(clean.iter().any(|x| x.abs() > 1e-3));
        let noise: Vec<f64> = (0..300).map(|i| ((i * 7919 % 301) as f64 / 150.0) - 1.0).collect();
        let base = mix_noise_at_snr(&clean, &noise, snr, seed).unwrap();
        let scaled_clean: Vec<f64> = clean.iter().map(|x| c * x).collect();
        let scaled = mix_noise_at_snr(&scaled_clean, &noise, snr, seed).unwrap();
        // Same noise segment and same SNR: the whole mixture scales by c.
        for (b, s) in base.iter().zip(&scaled) {
            prop_assert!((c * b - s).abs() <= 1e-9 * (1.0 + s.abs()));
        }
    }

    #[test]
    fn audio_reliability_is_bounded(samples in prop::collection::vec(-1.0f64..1.0, 400..2400), gain in 0.0f64..3.0) {
        let x: Vec<f64> = samples.iter().map(|s| s * gain).collect();
        let r = extract_audio_reliability(&x, 8000, 5).unwrap();
        prop_assert_eq!(r.width(), 9);
        prop_assert!(r.frames.all_finite());
        for p in r.column("pov").unwrap() {
            prop_assert!((0.0..=1.0).contains(&p));
        }
        for s in r.column("snr_est").unwrap() {
            prop_assert!((SNR_RANGE.0..=SNR_RANGE.1).contains(&s));
        }
    }

    #[test]
    fn snr_proxy_is_monotone_in_energy(e in prop::collection::vec(1e-6f64..10.0, 5..120), at in any::<prop::sample::Index>(), bump in 0.0f64..5.0) {
        let t = at.index(e.len());
        let before = estimate_snr_proxy(&e).unwrap();
        let mut raised = e.clone();
        raised[t] += bump;
        let after = estimate_snr_proxy(&raised).unwrap();
        prop_assert!(after[t] >= before[t] - 1e-12);
    }

    #[test]
    fn ctc_total_probability_is_one(rows in logit_rows(1..=5, 3)) {
        // Blank plus a two-letter alphabet: the label posteriors over every
        // sequence of length <= T sum to one.
        let logp = grid_from(&rows);
        let t = logp.rows();
        let mut seqs = vec![Vec::new()];
        let mut layer = seqs.clone();
        for _ in 0..t {
            layer = layer.iter().flat_map(|s: &Vec<usize>| [1usize, 2].map(|k| [s.as_slice(), &[k]].concat())).collect();
            seqs.extend(layer.iter().cloned());
        }
        let total: f64 = seqs.iter().map(|s| (-ctc_loss_raw(&logp, s, 0).unwrap().value()).exp()).sum();
        prop_assert!((total - 1.0).abs() <= 1e-8, "total {}", total);
    }

    #[test]
    fn ctc_prefix_scores_agree_with_full_loss(rows in logit_rows(1..=5, 4), labels in prop::collection::vec(1usize..3, 0..6)) {
        let logp = grid_from(&rows);
        let grid = PosteriorGrid::new(logp.clone(), 0).unwrap();
        let mut scorer = CtcPrefixScorer::new(&grid, 3);
        for i in 0..labels.len() {
            scorer.score(&labels[..i], labels[i]).unwrap();
        }
        let full = scorer.full_score(&labels).unwrap();
        let want = -ctc_loss_raw(&logp, &labels, 0).unwrap().value();
        if want.is_finite() {
            prop_assert!((full - want).abs() <= 1e-9 * (1.0 + want.abs()));
        } else {
            prop_assert_eq!(full, f64::NEG_INFINITY);
        }
    }

    #[test]
    fn collapse_removes_repeats_then_blanks(path in prop::collection::vec(0usize..4, 0..12)) {
        let out = collapse(&path, 0);
        prop_assert!(out.ids().iter().all(|&k| k != 0));
        prop_assert!(out.len() <= path.len());
    }

    #[test]
    fn stream_weight_with_one_active_stream_keeps_its_argmax(a in logit_rows(1..=6, 5), v in logit_rows(6..=6, 5), audio_active in any::<bool>()) {
        let la = grid_from(&a);
        let lv = grid_from(&v[..a.len()]);
        let n = la.rows();
        let (wa, wv) = if audio_active { (vec![1.0; n], vec![0.0; n]) } else { (vec![0.0; n], vec![1.0; n]) };
        let fused = stream_weight_fuse(&la, &lv, &wa, &wv).unwrap();
        let src = if audio_active { &la } else { &lv };
        let argmax = |t: &Tensor<f64>, r: usize| t.row(r).iter().enumerate().max_by(|x, y| x.1.total_cmp(y.1)).unwrap().0;
        for r in 0..n {
            prop_assert_eq!(argmax(&fused, r), argmax(src, r));
            prop_assert!(lse(fused.row(r)).abs() <= 1e-9);
        }
    }

    #[test]
    fn feature_file_round_trips(
        rows in 1usize..6,
        cols in 1usize..6,
        seed in any::<u64>(),
        meta in prop::collection::btree_map("[a-z_]{1,8}", "[ -~]{0,12}", 0..5),
    ) {
        let data: Vec<f64> = (0..rows * cols).map(|i| f64::from_bits(seed.rotate_left(i as u32) >> 2)).collect();
        let mut f = FeatureFile::new(Tensor::matrix(rows, cols, data));
        for (k, v) in &meta {
            f = f.with(k, v.trim());
        }
        let back = FeatureFile::<f64>::from_bytes(&f.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(&back.meta, &f.meta);
        prop_assert!(back.data.data().iter().zip(f.data.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn corrupted_checkpoint_bytes_error_instead_of_panicking(cut in 0usize..400, flip in any::<prop::sample::Index>(), byte in any::<u8>()) {
        let mut store = ParamStore::<f64>::new(3);
        store.insert("a.w", Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]), true);
        store.insert("a.stats.mean", Tensor::row_vector(vec![0.5; 3]), false);
        let mut ck = Checkpoint::new(store);
        ck.meta.insert("phase".into(), "ao".into());
        let bytes = ck.to_bytes();
        let truncated = &bytes[..cut.min(bytes.len() - 1)];
        prop_assert!(Checkpoint::<f64>::from_bytes(truncated, 0).is_err());
        let mut noisy = bytes.clone();
        let i = flip.index(noisy.len());
        noisy[i] ^= byte;
        // Any outcome but a panic is acceptable for a flipped payload byte.
        let _ = Checkpoint::<f64>::from_bytes(&noisy, 0);
    }

    #[test]
    fn sweep_tsv_round_trips(cells in prop::collection::vec(prop::option::weighted(0.9, 0.0f64..150.0), 11 * 3), reverb in any::<bool>()) {
        let mut columns: Vec<String> = [-12, -9, -6, -3, 0, 3, 6, 9, 12].iter().map(|s| s.to_string()).collect();
        columns.push("clean".into());
        if reverb {
            columns.push("reverb".into());
        }
        let width = columns.len();
        let rows = ["AO(m)", "AV(m.vc)", "DFN(m.vc)"]
            .iter()
            .enumerate()
            .map(|(i, l)| SweepRow { label: l.to_string(), cells: cells[i * 11..i * 11 + width].to_vec() })
            .collect();
        let s = SweepResult { columns, averaged: 10, rows };
        let text = s.to_tsv();
        prop_assert_eq!(SweepResult::parse_tsv(&text).unwrap(), s);
    }
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 24, ..ProptestConfig::default() })]

    #[test]
    fn search_components_match_rescoring(rows in logit_rows(2..=6, 5), alpha in 0.0f64..=1.0, theta in 0.0f64..1.0, beam in 1usize..6, seed in any::<u64>()) {
        let grid = PosteriorGrid::new(grid_from(&rows), 0).unwrap();
        let mut store = ParamStore::new(seed);
        let lm = LstmLm::new(&mut store, "lm", &LmConfig { layers: 1, units: 6, vocab: 5 }).unwrap();
        let table = |prefix: &[usize]| -> avfuse::Result<Vec<f64>> {
            let h = prefix.iter().fold(seed, |h, &t| h.rotate_left(9) ^ (t as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            log_softmax(&(0..5).map(|k| ((h >> (k * 8)) & 0xFF) as f64 / 64.0).collect::<Vec<_>>())
        };
        let cfg = BeamConfig { alpha, theta, beam, ..BeamConfig::default() };
        let mut scorer = table;
        let out = joint_beam_search(&grid, &mut scorer, Some((&lm, &store)), &cfg).unwrap();
        let mut scorer = table;
        let (c, s, l) = rescore_components(&grid, &mut scorer, Some((&lm, &store)), out.labels.ids()).unwrap();
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-9 * (1.0 + b.abs()) || (a == b);
        if theta > 0.0 {
            prop_assert!(close(out.best.lm_logp, l));
        }
        if alpha > 0.0 {
            prop_assert!(close(out.best.ctc_logp, c));
        }
        if alpha < 1.0 {
            prop_assert!(close(out.best.s2s_logp, s));
        }
        prop_assert!(close(out.score, cfg.combine(c, s, l, out.labels.len() + 1)));
    }
}

#[test]
fn dropout_keeps_expected_fraction_at_fixed_seed() {
    let n = 10_000;
    for (seed, rate) in [(7, 0.1), (7, 0.3), (11, 0.5), (13, 0.9)] {
        let mask: Vec<f64> = dropout_mask(seed, 0, n, rate);
        let kept = mask.iter().filter(|&&m| m != 0.0).count() as f64;
        let sigma = (n as f64 * rate * (1.0 - rate)).sqrt();
        assert!((kept - n as f64 * (1.0 - rate)).abs() <= 3.0 * sigma, "rate {rate}: kept {kept}");
    }
}

#[test]
fn feature_meta_order_is_stable() {
    let f = FeatureFile::new(Tensor::<f64>::zeros(&[1, 1])).with("z", 1).with("a", 2);
    let keys: Vec<&String> = f.meta.keys().collect();
    assert_eq!(keys, ["a", "z"]);
}
