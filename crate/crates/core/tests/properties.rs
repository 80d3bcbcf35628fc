use admix_core::align::ConsensusEstimate;
use admix_core::analytics::{token_component_posterior, token_posteriors, type_average};
use admix_core::corpus::{parse_bytes, Corpus, ParseOptions, SoundChangeInstance, Token};
use admix_core::genmodel::{log_joint, simulate, stick_breaking, HyperPrior, Hyperparams, ModelShape, SimShape};
use admix_core::transforms::{to_constrained, to_unconstrained, Layout};
use admix_core::vinfer::Model;
use proptest::prelude::*;

fn simplex(len: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.01f64..1.0, len).prop_map(|v| {
        let s: f64 = v.iter().sum();
        v.into_iter().map(|x| x / s).collect()
    })
}

fn instances() -> impl Strategy<Value = Vec<SoundChangeInstance>> {
    let row = (0..4usize, 0..5usize, 0..2usize, 0..3usize).prop_map(|(l, e, s, r)| {
        SoundChangeInstance::new(
            &format!("lang{l}"),
            &format!("et{e}"),
            ["p", "t"][s],
            ["a", "b", "c"][r],
        )
    });
    prop::collection::vec(row, 1..40)
}

/// Free coordinates of a parameter point: β′, the first K−1 entries of every
/// simplex, then δ and γ when free.
fn free_coords(layout: &Layout, u: &[f64]) -> Vec<f64> {
    let (p, _) = to_constrained(layout, u).unwrap();
    let mut x = p.beta_raw.clone();
    for row in &p.theta {
        x.extend_from_slice(&row[..row.len() - 1]);
    }
    for row in p.phi.iter().flatten() {
        x.extend_from_slice(&row[..row.len() - 1]);
    }
    if layout.delta_index().is_some() {
        x.push(p.delta);
    }
    if layout.gamma_index().is_some() {
        x.push(p.gamma);
    }
    x
}

fn ln_abs_det(mut m: Vec<Vec<f64>>) -> f64 {
    let n = m.len();
    let mut acc = 0.0;
    for c in 0..n {
        let pivot = (c..n)
            .max_by(|&a, &b| m[a][c].abs().total_cmp(&m[b][c].abs()))
            .unwrap();
        m.swap(c, pivot);
        let d = m[c][c];
        acc += d.abs().ln();
        for r in c + 1..n {
            let f = m[r][c] / d;
            for k in c..n {
                m[r][k] -= f * m[c][k];
            }
        }
    }
    acc
}

fn small_layout() -> Layout {
    Layout::new(ModelShape::new(2, 1, vec![2]), &Hyperparams::default())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn sticks_sum_to_one(raw in prop::collection::vec(1e-6f64..(1.0 - 1e-6), 0..12)) {
        let beta = stick_breaking(&raw).unwrap();
        prop_assert_eq!(beta.len(), raw.len() + 1);
        prop_assert!(beta.iter().all(|&b| b >= 0.0));
        prop_assert!((beta.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn unconstrained_round_trip(u in prop::collection::vec(-8.0f64..8.0, 20)) {
        // T=3, L=2, outcomes [2, 4]: 2 + 2·2 + 3·(1 + 3) + 2
        let layout = Layout::new(ModelShape::new(3, 2, vec![2, 4]), &Hyperparams::default());
        prop_assert_eq!(layout.dim(), u.len());
        let (p, _) = to_constrained(&layout, &u).unwrap();
        p.check(1e-10).unwrap();
        let back = to_unconstrained(&layout, &p).unwrap();
        for (a, b) in u.iter().zip(&back) {
            prop_assert!((a - b).abs() < 1e-7 * a.abs().max(1.0), "{a} vs {b}");
        }
    }

    #[test]
    fn log_jacobian_matches_determinant(u in prop::collection::vec(-3.0f64..3.0, 6)) {
        let layout = small_layout();
        prop_assert_eq!(layout.dim(), 6);
        let (_, jac) = to_constrained(&layout, &u).unwrap();
        let h = 1e-6;
        let mut m = vec![vec![0.0; 6]; 6];
        for j in 0..6 {
            let mut plus = u.clone();
            let mut minus = u.clone();
            plus[j] += h;
            minus[j] -= h;
            let (fp, fm) = (free_coords(&layout, &plus), free_coords(&layout, &minus));
            for i in 0..6 {
                m[i][j] = (fp[i] - fm[i]) / (2.0 * h);
            }
        }
        let fd = ln_abs_det(m);
        prop_assert!((fd - jac).abs() < 1e-5 * jac.abs().max(1.0), "fd {fd} vs {jac}");
    }

    #[test]
    fn density_gradient_matches_differences(u in prop::collection::vec(-2.0f64..2.0, 6)) {
        let (corpus, _) = admix_core::oracle::grid_case();
        let model = Model::new(&corpus, &Hyperparams { alpha: 0.7, truncation: 2, ..Hyperparams::default() }).unwrap();
        prop_assert_eq!(model.dim(), 6);
        let (v, g) = model.log_density_grad(&u).unwrap();
        prop_assert!((v - model.log_density(&u).unwrap()).abs() < 1e-12);
        let h = 1e-6;
        for i in 0..6 {
            let mut plus = u.clone();
            let mut minus = u.clone();
            plus[i] += h;
            minus[i] -= h;
            let fd = (model.log_density(&plus).unwrap() - model.log_density(&minus).unwrap()) / (2.0 * h);
            prop_assert!((fd - g[i]).abs() < 1e-5 * fd.abs().max(1.0), "coord {i}: {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn density_is_joint_plus_jacobian(u in prop::collection::vec(-3.0f64..3.0, 6)) {
        let (corpus, _) = admix_core::oracle::grid_case();
        let hp = Hyperparams { alpha: 0.7, truncation: 2, ..Hyperparams::default() };
        let model = Model::new(&corpus, &hp).unwrap();
        let (p, jac) = to_constrained(model.layout(), &u).unwrap();
        let direct = log_joint(&p, &corpus, &hp).unwrap() + jac;
        let v = model.log_density(&u).unwrap();
        prop_assert!((v - direct).abs() < 1e-9 * v.abs().max(1.0), "{v} vs {direct}");
    }

    #[test]
    fn row_order_does_not_change_indexing(rows in instances(), seed in any::<u64>()) {
        let a = Corpus::from_instances(rows.clone());
        let mut shuffled = rows;
        let n = shuffled.len();
        let mut s = seed;
        for i in (1..n).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            shuffled.swap(i, (s >> 33) as usize % (i + 1));
        }
        let b = Corpus::from_instances(shuffled);
        prop_assert_eq!(a.table(), b.table());
        prop_assert_eq!(a.language_counts().iter().sum::<usize>(), a.len());
        let mut ta = a.tokens().to_vec();
        let mut tb = b.tokens().to_vec();
        ta.sort();
        tb.sort();
        prop_assert_eq!(ta, tb);
    }

    #[test]
    fn likelihood_ignores_row_order(rows in instances(), u in prop::collection::vec(-2.0f64..2.0, 96)) {
        let a = Corpus::from_instances(rows.clone());
        let mut rev = rows;
        rev.reverse();
        let b = Corpus::from_instances(rev);
        let hp = Hyperparams { alpha: 0.5, truncation: 3, ..Hyperparams::default() };
        let layout = Layout::new(ModelShape::of(&a, 3), &hp);
        prop_assert!(layout.dim() <= u.len());
        let (p, _) = to_constrained(&layout, &u[..layout.dim()]).unwrap();
        let la = log_joint(&p, &a, &hp).unwrap();
        let lb = log_joint(&p, &b, &hp).unwrap();
        prop_assert!((la - lb).abs() < 1e-9 * la.abs().max(1.0));
        // the data term alone, with the prior removed through an empty corpus
        let prior = log_joint(&p, &a.retain_indexed(|_| false), &hp).unwrap();
        let data: f64 = a.tokens().iter().map(|t| {
            (0..3).map(|k| p.theta[t.language][k] * p.phi[k][t.env][t.outcome]).sum::<f64>().ln()
        }).sum();
        prop_assert!((la - prior - data).abs() < 1e-8 * la.abs().max(1.0));
    }

    #[test]
    fn tsv_round_trip(rows in instances()) {
        let a = Corpus::from_instances(rows);
        let b = parse_bytes(a.to_tsv().as_bytes(), ParseOptions::default()).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.to_tsv(), b.to_tsv());
    }

    #[test]
    fn posterior_ignores_theta_scale(
        theta in simplex(5),
        phi in prop::collection::vec(simplex(3), 5),
        c in 1e-3f64..1e3,
        outcome in 0..3usize,
    ) {
        let make = |row: Vec<f64>| ConsensusEstimate {
            theta: vec![row],
            phi: phi.iter().map(|r| vec![r.clone()]).collect(),
            usage: vec![0.2; 5],
        };
        let tok = Token { language: 0, env: 0, outcome };
        let p = token_component_posterior(&make(theta.clone()), tok).unwrap();
        let q = token_component_posterior(&make(theta.iter().map(|x| x * c).collect()), tok).unwrap();
        prop_assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for (a, b) in p.iter().zip(&q) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn type_average_is_mean_of_group(rows in instances(), u in prop::collection::vec(-2.0f64..2.0, 96)) {
        let corpus = Corpus::from_instances(rows);
        let hp = Hyperparams { truncation: 3, ..Hyperparams::default() };
        let layout = Layout::new(ModelShape::of(&corpus, 3), &hp);
        prop_assert!(layout.dim() <= u.len());
        let (p, _) = to_constrained(&layout, &u[..layout.dim()]).unwrap();
        let consensus = ConsensusEstimate::from_params(&p, &corpus.language_shares());
        let posts = token_posteriors(&consensus, &corpus).unwrap();
        let rows = type_average(&posts, &corpus);
        prop_assert_eq!(rows.iter().map(|r| r.count).sum::<usize>(), corpus.len());
        for row in &rows {
            prop_assert!((row.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let members: Vec<&Vec<f64>> = posts.iter().filter(|q| {
                let i = &corpus.instances()[q.index];
                i.etymon == row.etymon && i.sound == row.sound && i.reflex == row.reflex
            }).map(|q| &q.probs).collect();
            prop_assert_eq!(members.len(), row.count);
            for k in 0..3 {
                let m = members.iter().map(|q| q[k]).sum::<f64>() / row.count as f64;
                prop_assert!((m - row.probs[k]).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn simulated_counts_and_sparsity() {
    let truth = Hyperparams {
        alpha: 1e-4,
        delta: HyperPrior::Fixed(0.1),
        gamma: HyperPrior::Fixed(1.0),
        truncation: 3,
    };
    let shape = SimShape {
        languages: 6,
        environments: 10,
        outcomes_per_env: 10,
        tokens_per_language: 20,
    };
    let (corpus, gt) = simulate(&truth, &shape, 4).unwrap();
    assert_eq!(corpus.len(), 120);
    assert_eq!(gt.labels.len(), 120);
    assert!(corpus.language_counts().iter().all(|&c| c == 20));
    gt.params.check(1e-10).unwrap();
    // with α = 1e-4 nearly every φ row puts its mass on one outcome
    let rows: Vec<&Vec<f64>> = gt.params.phi.iter().flatten().collect();
    let peaked = rows.iter().filter(|r| r.iter().cloned().fold(0.0, f64::max) > 0.99).count();
    assert!(peaked * 10 >= rows.len() * 9, "{peaked} of {}", rows.len());
}
