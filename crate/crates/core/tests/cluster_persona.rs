mod common;

use common::{random_matrix, Recorder};
use mop_core::cluster::{cluster_records, cluster_restarts, sq_dist};
use mop_core::corpus::Example;
use mop_core::embed::HashingEmbedder;
use mop_core::math::Matrix;
use mop_core::persona::{label_persona, synthesize_personas, SynthConfig, UNKNOWN_LABEL};
use mop_core::prompt::TaskTemplates;
use proptest::prelude::*;

fn blobs(per: usize, centers: &[[f64; 2]], spread: f64, seed: u64) -> (Matrix, Vec<usize>) {
    let noise = random_matrix(per * centers.len(), 2, seed);
    let mut x = Matrix::zeros(per * centers.len(), 2);
    let mut truth = Vec::new();
    for (c, m) in centers.iter().enumerate() {
        for i in 0..per {
            let r = c * per + i;
            x[(r, 0)] = m[0] + spread * noise[(r, 0)];
            x[(r, 1)] = m[1] + spread * noise[(r, 1)];
            truth.push(c);
        }
    }
    (x, truth)
}

#[test]
fn separated_blobs_are_recovered() {
    let centers = [[0.0, 0.0], [10.0, 0.0], [0.0, 10.0], [10.0, 10.0]];
    let (x, truth) = blobs(100, &centers, 1.0, 1);
    let a = cluster_restarts(&x, 4, 2, 100, 5).unwrap();
    // best label permutation by majority per cluster
    let mut agree = 0;
    for c in 0..4 {
        let mut cnt = [0usize; 4];
        for i in a.members(c) {
            cnt[truth[i]] += 1;
        }
        agree += cnt.iter().max().unwrap();
    }
    assert!(agree as f64 >= 0.99 * 400.0, "{agree}");
}

#[test]
fn clustering_is_deterministic_per_seed() {
    let x = random_matrix(200, 3, 4);
    assert_eq!(cluster_records(&x, 5, 9, 50).unwrap(), cluster_records(&x, 5, 9, 50).unwrap());
}

#[test]
fn nearest_members_match_brute_force() {
    let x = random_matrix(120, 3, 5);
    let a = cluster_records(&x, 4, 1, 100).unwrap();
    for c in 0..4 {
        let mut all: Vec<(f64, usize)> = (0..120)
            .filter(|&i| a.assignments[i] == c)
            .map(|i| (sq_dist(x.row(i), a.centroids.row(c)), i))
            .collect();
        all.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        let want: Vec<usize> = all.iter().take(7).map(|p| p.1).collect();
        assert_eq!(a.nearest_members(&x, c, 7), want);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn inertia_never_increases(seed in 0u64..100_000, k in 1usize..8, n in 8usize..60) {
        let x = random_matrix(n, 3, seed);
        let a = cluster_records(&x, k, seed, 100).unwrap();
        for w in a.history.windows(2) {
            prop_assert!(w[1] <= w[0] + 1e-9 * (1.0 + w[0]));
        }
        prop_assert!(a.inertia <= a.history.last().unwrap() + 1e-9);
        prop_assert!(a.sizes().iter().all(|&s| s > 0));
        // every point sits with its nearest centroid
        for i in 0..n {
            let own = sq_dist(x.row(i), a.centroids.row(a.assignments[i]));
            for c in 0..k {
                prop_assert!(own <= sq_dist(x.row(i), a.centroids.row(c)) + 1e-12 || a.sizes()[a.assignments[i]] == 1);
            }
        }
    }
}

fn examples(texts: &[&str]) -> Vec<Example> {
    texts
        .iter()
        .enumerate()
        .map(|(i, t)| Example {
            id: format!("e{i}"),
            context: String::new(),
            response: t.to_string(),
        })
        .collect()
}

#[test]
fn personas_come_from_cluster_representatives() {
    let texts = [
        "goal match striker goal",
        "striker goal match match",
        "match goal goal striker",
        "stock bank bond yield",
        "bond yield stock bank",
        "lonely outlier zzqx",
    ];
    let ex = examples(&texts);
    let emb = HashingEmbedder::new(64, 3);
    let lm = Recorder::new("prompt echo\nThe short persona is: You are a keen writer.");
    let tpl = TaskTemplates::builtin("agnews").unwrap();
    let cfg = SynthConfig {
        k: 3,
        seed: 1,
        representatives: 2,
        ..Default::default()
    };
    let (personas, assign, report) = synthesize_personas(&ex, &emb, &lm, &tpl, &cfg).unwrap();
    assert_eq!(personas.len(), 3);
    assert!(personas.iter().all(|p| p.description == "You are a keen writer."));
    assert!(personas.iter().enumerate().all(|(c, p)| p.id == c && p.cluster == Some(c)));
    assert_eq!(report.sizes, assign.sizes());
    assert!(report.stub_personas.is_empty());
    let prompts = lm.prompts.borrow();
    assert_eq!(prompts.len(), 3);
    let single = assign.sizes().iter().position(|&s| s == 1).expect("outlier cluster");
    let p = &prompts[single];
    let listed = texts.iter().filter(|t| p.contains(*t)).count();
    assert_eq!(listed, 1);
    for (c, p) in prompts.iter().enumerate() {
        let listed = texts.iter().filter(|t| p.contains(*t)).count();
        assert_eq!(listed, assign.sizes()[c].min(2));
    }
}

#[test]
fn empty_generations_fall_back_to_a_stub() {
    let ex = examples(&["rose soil rose", "soil rose tulip"]);
    let emb = HashingEmbedder::new(32, 3);
    let lm = Recorder::new("The short persona is:   ");
    let cfg = SynthConfig {
        k: 1,
        retries: 1,
        ..Default::default()
    };
    let tpl = TaskTemplates::builtin("plain").unwrap();
    let (personas, _, report) = synthesize_personas(&ex, &emb, &lm, &tpl, &cfg).unwrap();
    assert_eq!(report.stub_personas, vec![0]);
    assert!(personas[0].description.contains("rose"));
    assert_eq!(lm.prompts.borrow().len(), 2);
}

#[test]
fn persona_labels_are_parsed_from_answers() {
    let tpl = TaskTemplates::builtin("agnews").unwrap();
    assert_eq!(label_persona("x", &Recorder::new(" B"), &tpl, 0).unwrap(), "sports news");
    assert_eq!(label_persona("x", &Recorder::new("business news"), &tpl, 0).unwrap(), "business news");
    assert_eq!(label_persona("x", &Recorder::new("A or B"), &tpl, 0).unwrap(), UNKNOWN_LABEL);
    let lm = Recorder::new("D");
    label_persona("You cover chips.", &lm, &tpl, 0).unwrap();
    let p = lm.prompts.borrow()[0].clone();
    assert!(p.contains("You cover chips.") && p.contains("D. sci/tech news"));
}

#[test]
fn too_many_clusters_is_an_error() {
    let ex = examples(&["a b c", "d e f"]);
    let emb = HashingEmbedder::new(16, 3);
    let lm = Recorder::new("x");
    let cfg = SynthConfig { k: 3, ..Default::default() };
    let tpl = TaskTemplates::builtin("plain").unwrap();
    assert!(synthesize_personas(&ex, &emb, &lm, &tpl, &cfg).is_err());
}

#[test]
fn stop_sequences_cut_persona_after_marker() {
    let ex = examples(&["goal match striker", "striker goal match"]);
    let emb = HashingEmbedder::new(32, 3);
    let lm = Recorder::new("echo\nThe short persona is: A fan of derbies.\nMore text.");
    let tpl = TaskTemplates::builtin("agnews").unwrap();
    let cfg = SynthConfig {
        k: 1,
        stop: vec!["\n".into()],
        ..Default::default()
    };
    let (personas, _, _) = synthesize_personas(&ex, &emb, &lm, &tpl, &cfg).unwrap();
    assert_eq!(personas[0].description, "A fan of derbies.");
    // a stop at the very start leaves nothing, so the stub takes over
    let lm = Recorder::new("words");
    let cfg = SynthConfig {
        stop: vec!["wo".into()],
        ..cfg
    };
    let (personas, _, report) = synthesize_personas(&ex, &emb, &lm, &tpl, &cfg).unwrap();
    assert_eq!(report.stub_personas, vec![0]);
    assert!(!personas[0].description.is_empty());
}
