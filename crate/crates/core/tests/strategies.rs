use mdnmt::corpus::{build_vocab, synth_tasks, CorpusSpec, DomainSpec, ParallelCorpus, Reorder, Split, SynthSpec};
use mdnmt::decode::{NmtScorer, StepModel};
use mdnmt::heads::{GroupId, HeadKind};
use mdnmt::model::{loss_value, ModelParams};
use mdnmt::strategy::{
    check_vocab_handoff, decode_context, Conditioning, CorpusGroup, ExperimentPlan, ParentModel, RunOutcome, Runner,
};
use mdnmt::Error;

/// In-domain ja-en, out-of-domain ja-en and out-of-domain zh-en corpora.
fn corpora() -> Vec<ParallelCorpus> {
    let ind = DomainSpec {
        name: "in".into(),
        region_start: 0,
        region_size: 40,
        reorder: Reorder::Identity,
    };
    let out = DomainSpec::overlapping("out", &ind, 0.5, Reorder::SwapPairs);
    let spec = SynthSpec {
        n_concepts: 60,
        min_len: 2,
        max_len: 5,
        zipf: 0.5,
        languages: vec!["ja".into(), "en".into(), "zh".into()],
        domains: vec![ind, out],
        corpora: vec![
            CorpusSpec::new("in", "ja", "en", "in", [40, 8, 8]),
            CorpusSpec::new("out", "ja", "en", "out", [120, 8, 8]),
            CorpusSpec::new("zh", "zh", "en", "out", [60, 8, 0]),
        ],
    };
    synth_tasks(&spec, 3).unwrap()
}

fn group(c: &[ParallelCorpus], g: usize, name: &str) -> CorpusGroup {
    let split = |s: Split| c.iter().find(|x| x.name == name && x.split == s).cloned();
    CorpusGroup::new(g, split(Split::Train).unwrap(), split(Split::Dev).unwrap(), split(Split::Test))
}

fn tiny(plan: &mut ExperimentPlan) {
    plan.model.d_model = 12;
    plan.model.n_heads = 2;
    plan.model.d_ff = 24;
    plan.model.n_enc_layers = 1;
    plan.model.n_dec_layers = 1;
    plan.model.max_len = 32;
    plan.training.max_tokens = 256;
    plan.training.warmup = 10;
    plan.training.eval_interval = 4;
    plan.training.window = 2;
    plan.training.max_batches = 8;
    plan.training.dev_sentences = 8;
    plan.decoding.last_k = 2;
    plan.decoding.test_sentences = Some(4);
    plan.decoding.beam.beam = 2;
    plan.prep.bpe_merges = 40;
    plan.prep.vocab_cap = 300;
}

fn plan(strategy: &str, parents: &[&str]) -> ExperimentPlan {
    let c = corpora();
    let parents = parents.iter().enumerate().map(|(i, n)| group(&c, i + 2, n)).collect();
    let mut p = ExperimentPlan::new(group(&c, 1, "in"), parents, strategy.parse().unwrap(), 5);
    tiny(&mut p);
    p
}

fn run(p: &ExperimentPlan) -> RunOutcome {
    Runner::<f32>::new().run(p).unwrap()
}

fn probe(o: &RunOutcome, p: &ExperimentPlan) -> mdnmt::corpus::Batch {
    let seg = o.prepared.bpe.apply_corpus(&p.child.dev);
    let mut ex = mdnmt::corpus::batch::encode_corpus(&seg, &o.prepared.vocab);
    for e in &mut ex {
        e.group = Some(p.child.group);
    }
    mdnmt::corpus::Batch::from_examples(&ex.iter().collect::<Vec<_>>()).unwrap()
}

#[test]
fn second_stages_start_from_the_parent_handoff() {
    for (strategy, parents) in [
        ("fine_tuning", &["out"][..]),
        ("mixed_fine_tuning", &["out"][..]),
        ("proposed_mft:domspecextr", &["out"][..]),
        ("fine_tuning", &["zh"][..]),
    ] {
        let p = plan(strategy, parents);
        let o = run(&p);
        assert_eq!(o.stages.len(), 2, "{strategy}");
        let (first, second) = (&o.stages[0], &o.stages[1]);
        assert!(second.initial.bitwise_eq(&first.handoff), "{strategy}");
        let b = probe(&o, &p);
        assert_eq!(
            loss_value(&second.initial, &b, 0.1).unwrap().to_bits(),
            loss_value(&first.handoff, &b, 0.1).unwrap().to_bits()
        );
    }
}

#[test]
fn parent_stages_never_see_in_domain_data() {
    let p = plan("proposed_mft:domextr", &["out"]);
    let o = run(&p);
    let (first, second) = (&o.stages[0], &o.stages[1]);
    assert_eq!(first.train_groups, vec![GroupId::raw(2)]);
    assert_eq!(first.train_pairs, p.parents[0].train.len());
    assert_eq!(second.train_groups, vec![GroupId::raw(1), GroupId::raw(2)]);
    // the mixed stage oversamples the small corpus up to the large one
    assert_eq!(second.train_pairs, 2 * p.parents[0].train.len());

    let m = run(&plan("mixed_fine_tuning", &["out"]));
    assert_eq!(m.stages[0].train_pairs, p.parents[0].train.len());
}

#[test]
fn group_count_follows_the_corpora() {
    let p = plan("proposed:domextr", &["out", "zh"]);
    let o = run(&p);
    let cfg = &o.stages[0].config;
    assert_eq!((cfg.n_groups, cfg.head_kind), (3, HeadKind::DomExtr));
    assert_eq!(o.model.head().bias.unwrap().shape(), [3, cfg.vocab_size]);
    assert_eq!(o.conditioning, Conditioning::Groups);
}

#[test]
fn extremizing_biases_are_learned_per_group() {
    let o = run(&plan("proposed:domextr", &["out"]));
    let bias = o.model.head().bias.unwrap();
    let v = bias.shape()[1];
    let (a, b) = bias.data().split_at(v);
    assert!(a.iter().any(|&x| x != 0.0));
    assert!(a != b);
}

#[test]
fn multi_domain_output_depends_on_the_domain_tag() {
    let p = plan("multi_domain", &["out"]);
    let o = run(&p);
    let src = o.prepared.vocab.encode(&o.prepared.bpe.apply_corpus(&p.child.dev).pairs[0].0);
    let mut rows = Vec::new();
    for g in [1, 2] {
        let ctx = decode_context(&o.prepared, o.conditioning, GroupId::raw(g), "en").unwrap();
        let mut scorer = NmtScorer::new(&o.model, &src, &ctx).unwrap();
        rows.push(scorer.log_probs(&[vec![]]).unwrap().remove(0));
    }
    assert_ne!(rows[0], rows[1]);
}

#[test]
fn cross_lingual_fine_tuning_maps_the_child_vocabulary() {
    let p = plan("fine_tuning", &["zh"]);
    assert!(p.cross_lingual());
    let o = run(&p);
    assert_eq!(o.stages[0].config.vocab_size, o.prepared.vocab.len());
    assert_eq!(o.stages[1].config, o.stages[0].config);
    let adapted = Runner::<f32>::new().run_with(
        &p,
        None,
        Some(ParentModel {
            params: o.stages[0].handoff.clone(),
            step: 8,
        }),
    );
    assert!(matches!(adapted, Err(Error::Plan(_))));
}

#[test]
fn shared_vocabulary_handoff_requires_identical_tokens() {
    let c = corpora();
    let tags = vec!["2d1".to_owned()];
    let a = build_vocab(&c[..1], &tags, 40).unwrap();
    let b = build_vocab(&c[3..4], &tags, 40).unwrap();
    assert!(check_vocab_handoff(&a, &a, false).is_ok());
    assert!(matches!(check_vocab_handoff(&a, &b, false), Err(Error::Vocab(_))));
}

#[test]
fn adaptation_continues_from_a_given_parent() {
    let p = plan("mixed_fine_tuning", &["out"]);
    let full = run(&p);
    let parent = ParentModel {
        params: full.stages[0].handoff.clone(),
        step: full.stages[0].outcome.batches,
    };
    let adapted = Runner::<f32>::new().run_with(&p, None, Some(parent.clone())).unwrap();
    assert_eq!(adapted.stages.len(), 1);
    assert!(adapted.stages[0].initial.bitwise_eq(&parent.params));
    assert!(adapted.model.bitwise_eq(&full.model));

    let single = plan("multi_domain", &["out"]);
    assert!(matches!(Runner::<f32>::new().run_with(&single, None, Some(parent.clone())), Err(Error::Plan(_))));

    let mut other = p.clone();
    other.model.d_model = 16;
    let err = Runner::<f32>::new().run_with(&other, None, Some(parent)).unwrap_err();
    assert!(matches!(err, Error::Checkpoint(ref m) if m.contains("d_model: 12 vs 16")), "{err}");
}

#[test]
fn runs_are_reproducible() {
    let p = plan("proposed_mft:domextr", &["out"]);
    let (a, b) = (run(&p), run(&p));
    assert!(a.model.bitwise_eq(&b.model));
    assert_eq!(a.scores, b.scores);
    let fresh = ModelParams::<f32>::init(&a.stages[0].config, 0).unwrap();
    assert!(!fresh.bitwise_eq(&a.stages[0].initial));
}
