use super::*;
use crate::autograd::fd::check;
use crate::generator::{ToyGenerator, ToyGeneratorConfig, EOS, INQUIRY};
use crate::tensor::log_softmax;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox<f64> {
    BoundingBox::new(x1, y1, x2, y2).unwrap()
}

fn pb(h: [f64; 4], o: [f64; 4], c: usize) -> PairBoxes<f64> {
    PairBoxes { human: bx(h[0], h[1], h[2], h[3]), object: bx(o[0], o[1], o[2], o[3]), category: CategoryId(c) }
}

fn brute_force(cost: &[Vec<f64>]) -> f64 {
    // best total over all partial injections maximizing the number of finite matches
    fn rec(i: usize, cost: &[Vec<f64>], used: &mut Vec<bool>) -> (usize, f64) {
        if i == cost.len() {
            return (0, 0.0);
        }
        let mut best = rec(i + 1, cost, used);
        for j in 0..used.len() {
            if !used[j] && cost[i][j].is_finite() {
                used[j] = true;
                let (k, c) = rec(i + 1, cost, used);
                used[j] = false;
                let cand = (k + 1, c + cost[i][j]);
                if cand.0 > best.0 || (cand.0 == best.0 && cand.1 < best.1 - 1e-12) {
                    best = cand;
                }
            }
        }
        best
    }
    let m = cost.first().map_or(0, Vec::len);
    rec(0, cost, &mut vec![false; m]).1
}

fn assignment_cost(cost: &[Vec<f64>], a: &[Option<usize>]) -> f64 {
    a.iter().enumerate().filter_map(|(i, j)| j.map(|j| cost[i][j])).sum()
}

#[test]
fn hungarian_matches_exhaustive_two_by_three() {
    let gts = [pb([0., 0., 10., 20.], [10., 5., 20., 15.], 1), pb([30., 0., 40., 20.], [40., 0., 50., 10.], 2)];
    let cands = [
        pb([1., 0., 10., 20.], [10., 5., 21., 15.], 1),
        pb([30., 1., 40., 20.], [40., 0., 50., 11.], 2),
        pb([0., 0., 11., 20.], [9., 5., 20., 15.], 1),
    ];
    let cost: Vec<Vec<f64>> = gts.iter().map(|g| cands.iter().map(|c| pair_cost(g, c)).collect()).collect();
    let a = hungarian(&cost);
    // enumerate all 6 injective assignments of 2 GTs into 3 candidates
    let mut best = (f64::MAX, (0, 0));
    for i in 0..3 {
        for j in 0..3 {
            if i != j && (cost[0][i] + cost[1][j]) < best.0 {
                best = (cost[0][i] + cost[1][j], (i, j));
            }
        }
    }
    assert_eq!(a, vec![Some(best.1 .0), Some(best.1 .1)]);
    let labels = salience_labels(&gts, &cands);
    let mut expect = vec![false; 3];
    expect[best.1 .0] = true;
    expect[best.1 .1] = true;
    assert_eq!(labels, expect);
    assert_eq!(salience_labels::<f64>(&[], &cands), vec![false; 3]);
}

proptest! {
    #[test]
    fn hungarian_is_optimal(n in 1usize..5, m in 1usize..5, seed in 0u64..1000) {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cost: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..m).map(|_| if rng.random_bool(0.15) { f64::INFINITY } else { rng.random_range(0.0..1.0) }).collect())
            .collect();
        let a = hungarian(&cost);
        let cols: Vec<usize> = a.iter().flatten().copied().collect();
        let mut dedup = cols.clone();
        dedup.sort();
        dedup.dedup();
        prop_assert_eq!(dedup.len(), cols.len());
        prop_assert!((assignment_cost(&cost, &a) - brute_force(&cost)).abs() < 1e-9);
    }
}

#[test]
fn salience_bce_limits() {
    let labels = [true, false, true];
    assert!(bce(&[1.0 - 1e-12, 1e-12, 1.0 - 1e-12], &labels).unwrap() < 1e-10);
    assert!((bce(&[0.5; 3], &labels).unwrap() - 2f64.ln()).abs() < 1e-15);

    let mut g = Graph::<f64>::new();
    let l = g.constant(Mat::zeros(3, 1));
    let loss = loss_salience(&mut g, l, &labels).unwrap();
    assert!((g.scalar(loss) - 2f64.ln()).abs() < 1e-12);
    let l = g.constant(Mat::from_f64(3, 1, &[40.0, -40.0, 40.0]).unwrap());
    let loss = loss_salience(&mut g, l, &labels).unwrap();
    assert!(g.scalar(loss) < 1e-15);
    // graph version equals probability-space oracle
    let raw = [0.3, -1.2, 2.0];
    let l = g.constant(Mat::from_f64(3, 1, &raw).unwrap());
    let loss = loss_salience(&mut g, l, &labels).unwrap();
    let probs: Vec<f64> = raw.iter().map(|z| 1.0 / (1.0 + (-z).exp())).collect();
    assert!((g.scalar(loss) - bce(&probs, &labels).unwrap()).abs() < 1e-12);
    let err = check(&Mat::from_f64(3, 1, &raw).unwrap(), |g, x| loss_salience(g, x, &labels).unwrap());
    assert!(err < 1e-4);
}

fn toy() -> ToyGenerator<f64> {
    ToyGenerator::new(ToyGeneratorConfig::default(), &[]).unwrap()
}

const VERBS: [&str; 8] = ["sit on", "stand on", "ride", "hold", "carry", "push", "pull", "look at"];

#[test]
fn generative_loss_oracles() {
    let gen = toy();
    let vocab = VerbVocabulary::new(&VERBS, gen.tokenizer(), None).unwrap();
    let inq = gen.tokenizer().encode(INQUIRY).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let k0 = Mat::randn(8, 32, 1.0, &mut rng);
    let target = vocab.target(VerbId(0)).unwrap(); // "sit on <eos>"
    let mask = vocab.mask().to_vec();

    let mut g = Graph::new();
    let k = g.constant(k0.clone());
    let out = loss_generative(&mut g, &gen, Some(k), &inq, &target, &mask).unwrap();
    let loss = g.scalar(out.loss);
    assert!(loss > 0.0);

    // independent computation through the cached decoder
    let mut state = gen.new_state();
    let prefix = Mat::vconcat(&[&k0, &gen.embed_text(&inq).unwrap()]);
    let mut logits = gen.decode_step(&prefix, &mut state).unwrap();
    let mut expect = 0.0;
    for (i, &t) in target.iter().enumerate() {
        let masked: Vec<f64> = logits.iter().zip(&mask).map(|(&l, &m)| if m { l } else { f64::NEG_INFINITY }).collect();
        expect -= log_softmax(&masked)[t];
        if i + 1 < target.len() {
            logits = gen.decode_step(&gen.embed_text(&[t]).unwrap(), &mut state).unwrap();
        }
    }
    assert!((loss - expect).abs() < 1e-6, "{loss} vs {expect}");

    // one admissible token per step forces probability 1
    let mut single = vec![false; gen.vocab_size()];
    single[EOS] = true;
    let mut g = Graph::new();
    let k = g.constant(k0.clone());
    let out = loss_generative(&mut g, &gen, Some(k), &inq, &[EOS], &single).unwrap();
    assert_eq!(g.scalar(out.loss), 0.0);

    let person = gen.tokenizer().id("person").unwrap();
    let mut g = Graph::new();
    assert!(matches!(
        loss_generative(&mut g, &gen, None, &inq, &[person], &mask),
        Err(Error::TargetOutsideMask { word, .. }) if word == "person"
    ));

    // gradient w.r.t. the kernel
    let err = check(&k0, |g, k| loss_generative(g, &gen, Some(k), &inq, &target, &mask).unwrap().loss);
    assert!(err < 1e-4, "{err}");
}

#[test]
fn nce_oracles() {
    assert!((info_nce_from_cosines(&[0.9, 0.1, 0.0, -0.2], 0.07).unwrap() - 1.3637236044952547e-05f64).abs() < 1e-12);
    assert!((info_nce_from_cosines(&[0.3; 4], 0.07).unwrap() - 4f64.ln()).abs() < 1e-12);
    assert!(info_nce_from_cosines(&[0.3, 0.2], 0.0).is_err());

    // collinear positive, orthogonal negatives: loss -> 0 as tau -> 0
    let w = Mat::from_rows(&[vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]]).unwrap();
    let kernel = Mat::from_rows(&[vec![2.0, 0.0, 0.0], vec![4.0, 0.0, 0.0]]).unwrap();
    let mut last = f64::MAX;
    for tau in [1.0, 0.1, 0.01] {
        let mut g = Graph::new();
        let k = g.constant(kernel.clone());
        let lv = loss_nce(&mut g, k, VerbId(0), &[VerbId(1), VerbId(2)], &w, tau).unwrap();
        let l = g.scalar(lv);
        assert!(l < last);
        last = l;
    }
    assert!(last < 1e-40);

    // graph loss equals the cosine oracle on random data
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let w = Mat::randn(5, 6, 1.0, &mut rng);
    let k0 = Mat::randn(3, 6, 1.0, &mut rng);
    let mean = k0.mean_rows();
    let cos: Vec<f64> = [1, 0, 3, 4].iter().map(|&v| crate::tensor::cosine(mean.as_slice(), w.row(v))).collect();
    let mut g = Graph::new();
    let k = g.constant(k0.clone());
    let negs = [VerbId(0), VerbId(3), VerbId(4)];
    let lv = loss_nce(&mut g, k, VerbId(1), &negs, &w, 0.07).unwrap();
    let l = g.scalar(lv);
    assert!((l - info_nce_from_cosines(&cos, 0.07).unwrap()).abs() < 1e-9);
    let err = check(&k0, |g, k| loss_nce(g, k, VerbId(1), &negs, &w, 0.5).unwrap());
    assert!(err < 1e-4, "{err}");

    let mut g = Graph::new();
    let k = g.constant(k0);
    assert!(loss_nce(&mut g, k, VerbId(1), &negs, &w, -1.0).is_err());
    assert!(loss_nce(&mut g, k, VerbId(1), &[], &w, 0.1).is_err());
}

#[test]
fn logic_oracles() {
    let ex = ExclusionSet::new(&[(VerbId(0), VerbId(1)), (VerbId(2), VerbId(3)), (VerbId(4), VerbId(5))], 6).unwrap();
    let run = |p: &[f64]| {
        let mut g = Graph::new();
        let pv = g.constant(Mat::row_vector(p.to_vec()));
        let l = loss_logic(&mut g, pv, &ex).unwrap();
        g.scalar(l)
    };
    assert_eq!(run(&[0.0, 0.9, 0.4, 0.0, 0.3, 0.0]), 0.0);
    assert!((run(&[0.3, 0.25, 0.6, 0.1, 0.05, 0.7]) - 0.39999999999999997).abs() < 1e-12);
    let single = ExclusionSet::new(&[(VerbId(0), VerbId(1))], 2).unwrap();
    let mut g = Graph::new();
    let pv = g.variable(Mat::row_vector(vec![0.5, 0.5]));
    let l = loss_logic(&mut g, pv, &single).unwrap();
    assert_eq!(g.scalar(l), 0.5);
    // ties split the subgradient equally
    let grads = g.backward(l);
    assert_eq!(grads.get(pv).unwrap().as_slice(), &[0.5, 0.5]);

    let x0 = Mat::row_vector(vec![0.3, 0.25, 0.6, 0.1, 0.05, 0.7]);
    let err = check(&x0, |g, p| loss_logic(g, p, &ex).unwrap());
    assert!(err < 1e-4);

    assert!(ExclusionSet::new(&[(VerbId(1), VerbId(1))], 3).is_err());
    assert!(ExclusionSet::new(&[(VerbId(1), VerbId(7))], 3).is_err());
    let mut g = Graph::new();
    let short = g.constant(Mat::row_vector(vec![0.5, 0.5]));
    assert!(loss_logic(&mut g, short, &ex).is_err());
}

#[test]
fn exclusion_file_and_negatives() {
    let gen = toy();
    let vocab = VerbVocabulary::new(&VERBS, gen.tokenizer(), None).unwrap();
    let ex = ExclusionSet::parse("sit on\tstand on\npull\tpush\n", &vocab).unwrap();
    assert!(ex.excludes(VerbId(1), VerbId(0)) && ex.excludes(VerbId(5), VerbId(6)));
    assert!(ExclusionSet::parse("sit on\tfly", &vocab).is_err());

    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bank = NegativeBank::for_vocabulary(8);
    assert_eq!(bank.negatives(VerbId(3), &mut rng), [0, 1, 2, 4, 5, 6, 7].map(VerbId).to_vec());
    let big = NegativeBank::for_vocabulary(100);
    let negs = big.negatives(VerbId(3), &mut rng);
    assert_eq!(negs.len(), 32);
    assert!(!negs.contains(&VerbId(3)));
}

#[test]
fn total_loss_examples() {
    let zero = LossWeights {
        lambda_det: 0.0,
        lambda_sal: 0.0,
        lambda_gen: 0.0,
        lambda_nce: 0.0,
        lambda_logic: 0.0,
        ..Default::default()
    };
    assert_eq!(total_loss_value([1.0, 2.0, 3.0, 4.0, 5.0], &zero).unwrap(), 0.0);
    let only_gen = LossWeights { lambda_gen: 1.0, ..zero.clone() };
    assert_eq!(total_loss_value([1.0, 2.0, 3.0, 4.0, 5.0], &only_gen).unwrap(), 3.0);
    let weights = LossWeights { lambda_sal: 0.0, ..Default::default() };
    assert!((total_loss_value([0.0, 0.0, 2.0, 4.0, 10.0], &weights).unwrap() - 5.0).abs() < 1e-12);
    assert!(matches!(total_loss_value([0.0, 0.0, f64::NAN, 0.0, 0.0], &weights), Err(Error::NonFiniteLoss("gen"))));

    let mut g = Graph::<f64>::new();
    let c = |g: &mut Graph<'_, f64>, v: f64| g.constant(Mat::filled(1, 1, v));
    let parts = LossComponents {
        gen: Some(c(&mut g, 2.0)),
        nce: Some(c(&mut g, 4.0)),
        logic: Some(c(&mut g, 10.0)),
        ..Default::default()
    };
    let t = total_loss(&mut g, &parts, &weights).unwrap();
    assert!((g.scalar(t) - 5.0).abs() < 1e-12);
    let bad = LossComponents { nce: Some(c(&mut g, f64::INFINITY)), ..Default::default() };
    assert!(matches!(total_loss(&mut g, &bad, &weights), Err(Error::NonFiniteLoss("nce"))));
    assert!(LossWeights { tau: 0.0, ..Default::default() }.validate().is_err());
    let mut g = Graph::<f64>::new();
    let none = FrozenDetector.compute(&mut g, &[]).unwrap();
    assert!(none.is_none());
}
