mod common;

use common::{toy_backend, Instance, Recorder};
use mop_core::gating::{Agents, GatingParams};
use mop_core::lm::LanguageModel;
use mop_core::prompt::TaskTemplates;
use mop_core::simulate::{frequencies, ContextSource, LabelMode, SimConfig, Simulator};

fn cfg() -> SimConfig {
    SimConfig {
        max_tokens: 16,
        ..Default::default()
    }
}

fn simulator<'a, L: LanguageModel + ?Sized>(
    inst: &'a Instance,
    params: &'a GatingParams,
    templates: &'a TaskTemplates,
    lm: &'a L,
) -> Simulator<'a, L, mop_core::embed::HashingEmbedder> {
    let agents = Agents::new(&inst.personas, &inst.pool, templates, lm);
    Simulator::new(params, &inst.state, agents, &inst.embedder, cfg()).unwrap()
}

#[test]
fn joint_draws_follow_gate_product() {
    let inst = Instance::new(3, 5, 1, 16, 1);
    let params = inst.params(4, 6.0, 1);
    let lm = Recorder::new("x");
    let sim = simulator(&inst, &params, &inst.templates, &lm);
    let g = sim.gates_at("goal rain").unwrap();
    let draws = 50_000;
    let mut counts = vec![0.0; 15];
    for i in 0..draws {
        let (c, h) = sim.sample_latent(&g, i, None).unwrap();
        counts[c * 5 + h] += 1.0 / draws as f64;
    }
    let mut tv = 0.0;
    for k in 0..3 {
        for j in 0..5 {
            tv += (counts[k * 5 + j] - g.pi[k] * g.omega[(k, j)]).abs();
        }
    }
    tv *= 0.5;
    assert!(tv <= 0.05, "total variation {tv}");
    let mx = g.pi.iter().cloned().fold(0.0, f64::max);
    assert!(mx > 0.4, "gate should be far from uniform, max pi {mx}");
}

#[test]
fn uniform_gates_give_uniform_persona_frequencies() {
    let inst = Instance::new(4, 3, 1, 16, 2);
    let params = GatingParams::uniform(4, 4, 16);
    let lm = Recorder::new("x");
    let sim = simulator(&inst, &params, &inst.templates, &lm);
    let g = sim.gates_at("").unwrap();
    let ids = (0..20_000).map(|i| sim.sample_latent(&g, i, None).unwrap().0);
    let f = frequencies(ids, 4);
    let l1: f64 = f.iter().map(|p| (p - 0.25).abs()).sum();
    assert!(l1 <= 0.02, "{f:?}");
}

#[test]
fn topic_label_renormalizes_over_labelled_personas() {
    let mut inst = Instance::new(4, 3, 1, 16, 3);
    inst.personas[1].label = Some("sports".into());
    inst.personas[3].label = Some("sports".into());
    let params = inst.params(4, 2.0, 3);
    let lm = Recorder::new("x");
    let sim = simulator(&inst, &params, &inst.templates, &lm);
    let ctx = ContextSource::Cycle(vec!["rain".into()]);
    let recs = sim
        .simulate(&ctx, 20_000, 5, Some(&LabelMode::Topic("sports".into())), None)
        .unwrap();
    let f = frequencies(recs.iter().map(|r| r.persona_id), 4);
    let pi = sim.gates_at("rain").unwrap().pi;
    let z = pi[1] + pi[3];
    let want = [0.0, pi[1] / z, 0.0, pi[3] / z];
    let l1: f64 = f.iter().zip(want).map(|(a, b)| (a - b).abs()).sum();
    assert!(l1 <= 0.05, "{f:?} vs {want:?}");
    assert!(recs.iter().all(|r| r.label.as_deref() == Some("sports")));
    assert!(sim
        .simulate(&ctx, 1, 5, Some(&LabelMode::Topic("weather".into())), None)
        .is_err());
}

#[test]
fn latent_sequence_does_not_depend_on_backend() {
    let inst = Instance::new(3, 4, 1, 16, 4);
    let params = inst.params(4, 2.0, 4);
    let a = Recorder::new("fixed reply");
    let b = toy_backend(9);
    let ctx = ContextSource::Sample(vec!["goal".into(), "rain wind".into(), "chip".into()]);
    let ra = simulator(&inst, &params, &inst.templates, &a).simulate(&ctx, 300, 8, None, None).unwrap();
    let rb = simulator(&inst, &params, &inst.templates, &b).simulate(&ctx, 300, 8, None, None).unwrap();
    let latent = |rs: &[mop_core::simulate::GenerationRecord]| {
        rs.iter().map(|r| (r.context.clone(), r.persona_id, r.exemplar_id)).collect::<Vec<_>>()
    };
    assert_eq!(latent(&ra), latent(&rb));
    assert!(ra.iter().any(|r| r.text != rb[0].text));
    assert_eq!(rb, simulator(&inst, &params, &inst.templates, &b).simulate(&ctx, 300, 8, None, None).unwrap());
}

#[test]
fn cycling_contexts_and_empty_runs() {
    let inst = Instance::new(2, 3, 1, 16, 5);
    let params = inst.params(4, 1.0, 5);
    let lm = Recorder::new("x");
    let sim = simulator(&inst, &params, &inst.templates, &lm);
    let ctx = ContextSource::Cycle(vec!["a".into(), "b".into(), "c".into()]);
    assert!(sim.simulate(&ctx, 0, 1, None, None).unwrap().is_empty());
    let recs = sim.simulate(&ctx, 7, 1, None, None).unwrap();
    let order: Vec<&str> = recs.iter().map(|r| r.context.as_str()).collect();
    assert_eq!(order, ["a", "b", "c", "a", "b", "c", "a"]);
    assert!(recs.iter().enumerate().all(|(i, r)| r.seed == mop_core::rng::derive_seed(1, i as u64)));
    assert!(sim.simulate(&ContextSource::Empty, 3, 1, None, None).is_err());
    assert!(sim.simulate(&ContextSource::Cycle(vec![]), 3, 1, None, None).is_err());
}

#[test]
fn context_free_task_accepts_empty_source() {
    let inst = Instance::new(3, 4, 1, 16, 6);
    let params = inst.params(4, 1.0, 6);
    let lm = Recorder::new("news");
    let tpl = TaskTemplates::builtin("agnews").unwrap();
    let sim = simulator(&inst, &params, &tpl, &lm);
    let recs = sim.simulate(&ContextSource::Empty, 5000, 2, None, None).unwrap();
    assert_eq!(recs.len(), 5000);
    assert!(recs.iter().all(|r| r.context.is_empty() && r.text == "news" && r.backend == "recorder"));
    let prompts = lm.prompts.borrow();
    assert!(prompts[0].contains(&inst.personas[recs[0].persona_id].description));
    assert!(prompts[0].contains(&inst.pool.get(recs[0].exemplar_id).response));
}

#[test]
fn sentiment_label_steers_the_prompt() {
    let inst = Instance::new(2, 3, 1, 16, 7);
    let params = inst.params(4, 1.0, 7);
    let lm = Recorder::new("tasty");
    let tpl = TaskTemplates::builtin("yelp").unwrap();
    let sim = simulator(&inst, &params, &tpl, &lm);
    let ctx = ContextSource::Cycle(vec!["Blue Door Cafe".into()]);
    let recs = sim
        .simulate(&ctx, 20, 3, Some(&LabelMode::Sentiment("positive".into())), None)
        .unwrap();
    assert!(recs.iter().all(|r| r.label.as_deref() == Some("positive")));
    for p in lm.prompts.borrow().iter() {
        assert!(p.contains("had positive impression"));
        assert!(p.contains("Blue Door Cafe"));
    }
}

#[test]
fn persona_mixing_draws_distinct_personas() {
    let inst = Instance::new(4, 5, 1, 16, 8);
    let params = inst.params(4, 2.0, 8);
    let lm = Recorder::new("blended writer");
    let sim = simulator(&inst, &params, &inst.templates, &lm);
    let g = sim.gates_at("rose").unwrap();

    let mixed = sim.mix_personas(&g, 2, 11).unwrap();
    assert_eq!(mixed.description, "blended writer");
    let prompt = lm.prompts.borrow().last().unwrap().clone();
    for &(c, h) in &mixed.pairs {
        assert!(prompt.contains(&inst.personas[c].description));
        assert!(prompt.contains(&inst.pool.get(h).response));
    }
    let taus: Vec<f64> = mixed.pairs.iter().map(|&(c, _)| params.tau(c)).collect();
    let lo = taus.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = taus.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    assert!(mixed.tau >= lo - 1e-12 && mixed.tau <= hi + 1e-12);

    let all = sim.mix_personas(&g, 4, 12).unwrap();
    let mut ids: Vec<usize> = all.pairs.iter().map(|p| p.0).collect();
    ids.sort_unstable();
    assert_eq!(ids, vec![0, 1, 2, 3]);

    for seed in 0..1000 {
        let m = sim.mix_personas(&g, 3, seed).unwrap();
        let mut ids: Vec<usize> = m.pairs.iter().map(|p| p.0).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 3);
    }
    assert!(sim.mix_personas(&g, 1, 0).is_err());
    assert!(sim.mix_personas(&g, 5, 0).is_err());
}

#[test]
fn mixed_generation_prompt_carries_every_exemplar() {
    let inst = Instance::new(3, 6, 1, 16, 9);
    let params = inst.params(4, 2.0, 9);
    let lm = Recorder::new("merged");
    let sim = simulator(&inst, &params, &inst.templates, &lm);
    let recs = sim
        .simulate(&ContextSource::Cycle(vec!["wind".into()]), 5, 4, None, Some(2))
        .unwrap();
    let prompts = lm.prompts.borrow();
    for (i, r) in recs.iter().enumerate() {
        assert_eq!(r.mixed_from.len(), 2);
        assert_eq!(r.mixed_persona.as_deref(), Some("merged"));
        assert_eq!((r.persona_id, r.exemplar_id), r.mixed_from[0]);
        let sample_prompt = &prompts[2 * i + 1];
        assert!(sample_prompt.starts_with("merged\n"));
        for &(_, h) in &r.mixed_from {
            assert!(sample_prompt.contains(&inst.pool.get(h).response));
        }
    }
    assert!(sim
        .simulate(&ContextSource::Cycle(vec!["wind".into()]), 1, 4, Some(&LabelMode::Sentiment("x".into())), Some(2))
        .is_err());
}

#[test]
fn stop_sequences_truncate_generations() {
    use mop_core::simulate::truncate_at_stop;
    let stops = vec!["\n".to_string(), "END".to_string()];
    assert_eq!(truncate_at_stop("ab END\ncd".into(), &stops), "ab ");
    assert_eq!(truncate_at_stop("abc".into(), &stops), "abc");
    assert_eq!(truncate_at_stop("abc".into(), &["".to_string()]), "abc");

    let inst = Instance::new(2, 3, 1, 16, 4);
    let params = inst.params(4, 1.0, 4);
    let templates = TaskTemplates::builtin("plain").unwrap();
    let lm = Recorder::new("first line\nsecond line");
    let agents = Agents::new(&inst.personas, &inst.pool, &templates, &lm);
    let config = SimConfig {
        stop: vec!["\n".into()],
        ..cfg()
    };
    let sim = Simulator::new(&params, &inst.state, agents, &inst.embedder, config).unwrap();
    let recs = sim.simulate(&ContextSource::Cycle(vec!["c".into()]), 3, 2, None, None).unwrap();
    assert!(recs.iter().all(|r| r.text == "first line"));
}
