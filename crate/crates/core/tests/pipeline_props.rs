use atg_core::dtw::{pairwise_similarity, SimilarityMatrix};
use atg_core::entropy::{segment, Segment};
use atg_core::graph::{
    build_graph, encoded_len, node_features, sample_to_graph, threshold_from_quantile, GraphSpec, SimilarityGraph,
    ThresholdPolicy,
};
use atg_core::signal::{
    generate_synthetic_dataset, make_samples, LabeledSample, BASE_FREQ_HZ, FREQ_GAP_HZ, SYNTH_SAMPLE_RATE_HZ,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_matrix(n: usize, seed: u64) -> SimilarityMatrix {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = vec![vec![1.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let v = rng.random::<f64>();
            m[i][j] = v;
            m[j][i] = v;
        }
    }
    SimilarityMatrix::from_dense(m).unwrap()
}

fn dummy_segments(n: usize, w: usize) -> Vec<Segment> {
    (0..n).map(|k| Segment { values: vec![(0..w).map(|t| ((t * (k + 1)) % 7) as f64).collect()], start_index: k }).collect()
}

proptest! {
    #[test]
    fn edges_are_exactly_the_threshold_scan(n in 2usize..12, seed in any::<u64>(), tau in 0.0f64..1.0) {
        let sim = random_matrix(n, seed);
        let g = build_graph(&dummy_segments(n, 4), &sim, tau, 0).unwrap();
        let mut expect = Vec::new();
        for i in 0..n {
            for j in i + 1..n {
                if sim.get(i, j) as f32 > tau as f32 {
                    expect.push((i, j));
                }
            }
        }
        let got: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.0, e.1)).collect();
        prop_assert_eq!(got, expect);
    }

    #[test]
    fn raising_tau_never_adds_edges(n in 2usize..12, seed in any::<u64>(), a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let sim = random_matrix(n, seed);
        let segs = dummy_segments(n, 4);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let gl = build_graph(&segs, &sim, lo, 0).unwrap();
        let gh = build_graph(&segs, &sim, hi, 0).unwrap();
        for e in &gh.edges {
            prop_assert!(gl.edges.contains(e));
        }
    }

    #[test]
    fn quantile_matches_sort(n in 2usize..10, seed in any::<u64>(), q in 0.0f64..=1.0) {
        let sim = random_matrix(n, seed);
        let mut v = sim.upper_triangle();
        v.sort_by(f64::total_cmp);
        let pos = q * (v.len() - 1) as f64;
        let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
        let expect = v[lo] + (v[hi] - v[lo]) * (pos - lo as f64);
        prop_assert!((threshold_from_quantile(&sim, q).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn features_are_z_normalized(values in prop::collection::vec(-50.0f64..50.0, 3..40)) {
        prop_assume!(values.iter().any(|&v| v != values[0]));
        let f = node_features(&Segment { values: vec![values.clone()], start_index: 0 });
        let n = f.len() as f64;
        let mean = f.iter().sum::<f64>() / n;
        let var = f.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        prop_assert!(mean.abs() < 1e-9);
        prop_assert!((var - 1.0).abs() < 1e-6);
    }
}

fn sample(data: Vec<f64>) -> LabeledSample {
    LabeledSample { data: vec![data], label: 2, source_id: "t".into(), start_index: 0 }
}

#[test]
fn spec_example_edges() {
    let sim = SimilarityMatrix::from_dense(vec![vec![1.0, 0.4, 0.2], vec![0.4, 1.0, 0.6], vec![0.2, 0.6, 1.0]]).unwrap();
    let g = build_graph(&dummy_segments(3, 4), &sim, 0.3, 1).unwrap();
    assert_eq!(g.edges, vec![(0, 1, 0.4f32), (1, 2, 0.6f32)]);
}

#[test]
fn container_round_trip_and_size() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let data: Vec<f64> = (0..1024).map(|_| rng.random_range(-1.0..1.0)).collect();
    let spec = GraphSpec { window: 32, step: 16, policy: ThresholdPolicy::Quantile(0.5), band_radius: None };
    let g = sample_to_graph(&sample(data), &spec).unwrap();
    assert_eq!(g.n, 63);
    let bytes = g.to_bytes();
    assert_eq!(bytes.len(), encoded_len(63, 32, g.edges.len()));
    assert_eq!(bytes.len(), 28 + 4 * 63 + 4 * 63 * 32 + 12 * g.edges.len());
    assert_eq!(SimilarityGraph::from_bytes(&bytes).unwrap(), g);

    let spec_max = GraphSpec { policy: ThresholdPolicy::Quantile(1.0), ..spec };
    let empty = sample_to_graph(&sample((0..1024).map(|t| (t as f64 * 0.1).sin()).collect()), &spec_max).unwrap();
    assert!(empty.edges.is_empty());
    assert_eq!(SimilarityGraph::from_bytes(&empty.to_bytes()).unwrap(), empty);
}

#[test]
fn rebuild_is_byte_identical() {
    let recs = generate_synthetic_dataset(2, 1, 1024, 3).unwrap();
    let s = make_samples(&recs[1], 1024, 512).unwrap();
    let spec = GraphSpec { window: 20, step: 10, policy: ThresholdPolicy::Quantile(0.5), band_radius: Some(4) };
    assert_eq!(sample_to_graph(&s[0], &spec).unwrap().to_bytes(), sample_to_graph(&s[0], &spec).unwrap().to_bytes());
}

#[test]
fn regimes_cluster_under_quantile_threshold() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut data: Vec<f64> = (0..512).map(|t| (t as f64 * std::f64::consts::TAU / 16.0).sin()).collect();
    data.extend((0..512).map(|_| rng.random_range(-1.0..1.0)));
    let spec = GraphSpec { window: 32, step: 16, policy: ThresholdPolicy::Quantile(0.5), band_radius: None };
    let g = sample_to_graph(&sample(data), &spec).unwrap();
    let half = |i: usize| g.node_order[i] + 32 <= 512;
    let tail = |i: usize| g.node_order[i] >= 512;
    let (mut intra, mut inter) = (0usize, 0usize);
    let (mut intra_pairs, mut inter_pairs) = (0usize, 0usize);
    for i in 0..g.n {
        for j in i + 1..g.n {
            if (half(i) && half(j)) || (tail(i) && tail(j)) {
                intra_pairs += 1;
            } else if (half(i) && tail(j)) || (tail(i) && half(j)) {
                inter_pairs += 1;
            }
        }
    }
    for &(i, j, _) in &g.edges {
        if (half(i) && half(j)) || (tail(i) && tail(j)) {
            intra += 1;
        } else if (half(i) && tail(j)) || (tail(i) && half(j)) {
            inter += 1;
        }
    }
    assert!(intra as f64 / intra_pairs as f64 > inter as f64 / inter_pairs as f64);
}

// Frequency of the largest DFT bin between 100 Hz and 3 kHz.
fn dominant_hz(x: &[f64]) -> f64 {
    let n = x.len();
    let mut best = (0.0, 0.0);
    for k in 1..n / 2 {
        let hz = k as f64 * SYNTH_SAMPLE_RATE_HZ / n as f64;
        if !(100.0..3000.0).contains(&hz) {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (t, v) in x.iter().enumerate() {
            let ph = std::f64::consts::TAU * (k * t) as f64 / n as f64;
            re += v * ph.cos();
            im -= v * ph.sin();
        }
        let p = re * re + im * im;
        if p > best.1 {
            best = (hz, p);
        }
    }
    best.0
}

#[test]
fn synthetic_classes_differ_by_the_frequency_gap() {
    let recs = generate_synthetic_dataset(2, 4, 1200, 7).unwrap();
    let mean = |c: usize| {
        let v: Vec<f64> = recs.iter().filter(|r| r.label == c).map(|r| dominant_hz(&r.channels[0])).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (f0, f1) = (mean(0), mean(1));
    assert!((f0 - BASE_FREQ_HZ).abs() <= 10.0, "{f0}");
    assert!(((f1 - f0) - FREQ_GAP_HZ).abs() <= 10.0, "{f0} {f1}");
}

#[test]
fn segment_starts_step_evenly() {
    let ch = vec![(0..100).map(f64::from).collect::<Vec<f64>>()];
    let segs = segment(&ch, 10, 7).unwrap();
    assert_eq!(segs.len(), 13);
    assert!(segs.windows(2).all(|w| w[1].start_index - w[0].start_index == 7));
    let m = pairwise_similarity(&segs, None).unwrap();
    assert_eq!(m.n(), 13);
}
