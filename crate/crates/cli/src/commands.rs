use std::io::{self, Write};
use std::path::{Path, PathBuf};

use mdnmt::corpus::{
    inject_tags, oversample_merge, synth_tasks, tokenize, MergeOptions, ParallelCorpus, Sentence, SubwordModel, SynthSpec,
    Vocab,
};
use mdnmt::decode::{average_checkpoints, bleu4, CheckpointSet, DecodeContext};
use mdnmt::model::{ModelConfig, ModelParams};
use mdnmt::strategy::{
    decode_context, prepare as learn_preprocessing, sub_seed, Conditioning, CorpusGroup, Detokenizer, EvalSet,
    ExperimentPlan, ParentModel, Prepared, Runner, StrategyKind,
};
use mdnmt::tensor::Float;
use mdnmt::{Error, Result};
use sha2::{Digest, Sha256};

use crate::checkpoint::{self, hex};
use crate::config::ExperimentConfig;
use crate::run_dir::{self, create_dir, fresh_dir, read_text, write_text, GroupEntry, RunInfo};
use crate::Common;

const PREP_MANIFEST: &str = "prep.manifest";
const TAGGED_STEM: &str = "train.tagged";

pub fn stdout_err(e: io::Error) -> Error {
    Error::Data(format!("cannot write output: {e}"))
}

fn load_config(c: &Common) -> Result<(ExperimentConfig, String)> {
    let path = c
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("this command needs --config".into()))?;
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    let cfg = ExperimentConfig::from_text(&text, path.parent().unwrap_or(Path::new(".")))?;
    Ok((cfg, text))
}

fn seed(c: &Common, cfg: &ExperimentConfig) -> u64 {
    c.seed.unwrap_or(cfg.seed)
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

/// Digest of a generator spec; equal specs hash equally.
pub fn spec_hash(spec: &SynthSpec) -> String {
    sha256_hex(format!("{spec:?}").as_bytes())
}

pub fn synth_data(c: &Common, out: &mut dyn Write) -> Result<()> {
    let (cfg, _) = load_config(c)?;
    let spec = cfg.synth()?;
    let dir = c
        .out
        .clone()
        .or_else(|| cfg.data.as_ref().map(|d| d.corpus_dir.clone()))
        .ok_or_else(|| Error::Config("synth-data needs --out or a [data] corpus_dir".into()))?;
    fresh_dir(&dir, c.force)?;
    let seed = seed(c, &cfg);
    let hash = spec_hash(spec);
    let corpora = synth_tasks(spec, seed)?;
    let extra = [("seed".to_owned(), seed.to_string()), ("spec_hash".to_owned(), hash.clone())];
    let mut index = format!("seed={seed}\nspec_hash={hash}\n");
    for corpus in &corpora {
        let stem = format!("{}.{}", corpus.name, corpus.split.name());
        corpus.write(&dir, &stem, &extra)?;
        index.push_str(&format!("corpus.{stem}={}\n", corpus.len()));
    }
    write_text(&dir.join("synth.manifest"), &index)?;
    writeln!(out, "wrote {} corpus files to {}", corpora.len(), dir.display()).map_err(stdout_err)
}

/// Reads the configured corpora into a validated plan; group `k` is the
/// `k`-th corpus of the [data] section.
pub fn load_plan(cfg: &ExperimentConfig, seed: u64) -> Result<(ExperimentPlan, Vec<GroupEntry>)> {
    let data = cfg.data()?;
    let mut groups = Vec::new();
    for (i, name) in data.corpus_names().iter().enumerate() {
        let read = |split: &str| ParallelCorpus::read(&data.corpus_dir, &format!("{name}.{split}"));
        let test = if data.corpus_dir.join(format!("{name}.test.manifest")).exists() {
            Some(read("test")?)
        } else {
            None
        };
        groups.push(CorpusGroup::new(i + 1, read("train")?, read("dev")?, test));
    }
    let entries = groups
        .iter()
        .map(|g| GroupEntry {
            group: g.group,
            name: g.name().to_owned(),
            src_lang: g.train.src_lang.clone(),
            tgt_lang: g.train.tgt_lang.clone(),
        })
        .collect();
    let child = groups.remove(0);
    let mut plan = ExperimentPlan::new(child, groups, cfg.strategy, seed);
    plan.model = cfg.model.clone();
    plan.training = cfg.training.clone();
    plan.decoding = cfg.decoding.clone();
    plan.prep = cfg.prep.clone();
    plan.validate()?;
    Ok((plan, entries))
}

/// Digest of everything the subword model and vocabulary depend on.
fn prep_input_hash(plan: &ExperimentPlan) -> String {
    let mut h = Sha256::new();
    h.update(format!("{:?}{:?}", plan.prep, plan.scheme).as_bytes());
    for g in plan.groups() {
        h.update(g.train.name.as_bytes());
        for (s, t) in &g.train.pairs {
            h.update(s.join(" ").as_bytes());
            h.update(b"\t");
            h.update(t.join(" ").as_bytes());
            h.update(b"\n");
        }
    }
    hex(&h.finalize())
}

fn file_hash(path: &Path) -> Option<String> {
    std::fs::read(path).ok().map(|b| sha256_hex(&b))
}

/// Whether `dir` holds artifacts for `input_hash` whose files are intact;
/// `also` names manifest keys that must match as well.
fn prep_current(dir: &Path, input_hash: &str, also: &[(&str, String)]) -> bool {
    let Ok(text) = std::fs::read_to_string(dir.join(PREP_MANIFEST)) else {
        return false;
    };
    let Ok(kv) = mdnmt::corpus::parse_key_values(&text) else {
        return false;
    };
    let get = |k: &str| kv.iter().find(|(key, _)| key == k).map(|(_, v)| v.as_str());
    get("input_hash") == Some(input_hash)
        && also.iter().all(|(k, v)| get(k) == Some(v.as_str()))
        && kv
            .iter()
            .filter_map(|(k, v)| k.strip_prefix("file.").map(|f| (f, v)))
            .all(|(f, v)| file_hash(&dir.join(f)).as_deref() == Some(v.as_str()))
}

pub fn prepare(c: &Common, out: &mut dyn Write) -> Result<()> {
    let (cfg, _) = load_config(c)?;
    let seed = seed(c, &cfg);
    let (plan, _) = load_plan(&cfg, seed)?;
    let dir = c.out.clone().unwrap_or_else(|| cfg.data.as_ref().expect("plan needs data").prep_dir.clone());
    let input_hash = prep_input_hash(&plan);
    if !c.force && prep_current(&dir, &input_hash, &[("seed", seed.to_string())]) {
        return writeln!(out, "{} is up to date", dir.display()).map_err(stdout_err);
    }
    create_dir(&dir)?;
    let train: Vec<ParallelCorpus> = plan.groups().map(|g| g.train.clone()).collect();
    let prepared = learn_preprocessing(&train, &plan.scheme, &plan.prep)?;
    prepared.bpe.save(&dir.join(run_dir::BPE))?;
    prepared.vocab.save(&dir.join(run_dir::VOCAB))?;
    let mut parts = Vec::new();
    for g in plan.groups() {
        let seg = prepared.bpe.apply_corpus(&g.train);
        parts.push(inject_tags(&seg, &plan.scheme, g.group.get(), &g.train.tgt_lang)?);
    }
    let merged = oversample_merge(
        &parts,
        sub_seed(seed, "prepare_merge"),
        MergeOptions {
            ratio_cap: plan.training.oversample_cap,
        },
    )?;
    let merged = ParallelCorpus {
        name: "tagged".into(),
        ..merged
    };
    merged.write(&dir, TAGGED_STEM, &[])?;
    let mut manifest = format!("input_hash={input_hash}\nseed={seed}\n");
    for f in [
        run_dir::BPE.to_owned(),
        run_dir::VOCAB.to_owned(),
        format!("{TAGGED_STEM}.tsv"),
        format!("{TAGGED_STEM}.manifest"),
    ] {
        let h = file_hash(&dir.join(&f)).ok_or_else(|| Error::Data(format!("cannot read back {f}")))?;
        manifest.push_str(&format!("file.{f}={h}\n"));
    }
    write_text(&dir.join(PREP_MANIFEST), &manifest)?;
    writeln!(
        out,
        "prepared {}: {} merges, {} vocabulary entries, {} tagged training pairs",
        dir.display(),
        prepared.bpe.merges.len(),
        prepared.vocab.len(),
        merged.len()
    )
    .map_err(stdout_err)
}

/// Subword model and vocabulary written by `prepare` for this plan.
pub fn load_prepared(cfg: &ExperimentConfig, plan: &ExperimentPlan) -> Result<Prepared> {
    let dir = &cfg.data()?.prep_dir;
    if !prep_current(dir, &prep_input_hash(plan), &[]) {
        return Err(Error::Data(format!(
            "preprocessing in {} is missing or does not match the configured corpora; run `mdnmt prepare` first",
            dir.display()
        )));
    }
    let tags = plan.scheme.tags();
    Ok(Prepared {
        bpe: SubwordModel::load(&dir.join(run_dir::BPE), tags.clone())?,
        vocab: Vocab::load(&dir.join(run_dir::VOCAB), &tags)?,
        scheme: plan.scheme.clone(),
    })
}

/// Model configuration the adapted stage of `plan` will have.
fn adapted_config(plan: &ExperimentPlan, prepared: &Prepared) -> ModelConfig {
    ModelConfig {
        vocab_size: prepared.vocab.len(),
        head_kind: plan.strategy.head_kind(),
        n_groups: match plan.strategy {
            StrategyKind::ProposedMft(_) => plan.n_groups(),
            _ => 1,
        },
        seed: plan.seed,
        ..plan.model.clone()
    }
}

/// `train`, or `adapt` when `parent` is given.
pub fn train(c: &Common, parent: Option<&Path>, out: &mut dyn Write) -> Result<()> {
    let (cfg, text) = load_config(c)?;
    let seed = seed(c, &cfg);
    let (plan, groups) = load_plan(&cfg, seed)?;
    let prepared = load_prepared(&cfg, &plan)?;
    let dir = c
        .out
        .clone()
        .ok_or_else(|| Error::Config("training needs --out for the run directory".into()))?;
    if parent.is_some() && !plan.strategy.two_stage() {
        return Err(Error::Plan(format!(
            "strategy `{}` has a single stage; adapt needs fine_tuning, mixed_fine_tuning or proposed_mft",
            plan.strategy
        )));
    }
    match c.precision {
        64 => train_as::<f64>(c, &dir, &plan, &groups, prepared, parent, &text, out),
        _ => train_as::<f32>(c, &dir, &plan, &groups, prepared, parent, &text, out),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_as<T: Float>(
    c: &Common,
    dir: &Path,
    plan: &ExperimentPlan,
    groups: &[GroupEntry],
    prepared: Prepared,
    parent: Option<&Path>,
    config_text: &str,
    out: &mut dyn Write,
) -> Result<()> {
    let parent = match parent {
        None => None,
        Some(path) => {
            let (step, params) = checkpoint::load::<T>(path)?;
            let diff = params.config.diff(&adapted_config(plan, &prepared));
            if !diff.is_empty() {
                return Err(Error::Checkpoint(format!(
                    "parent {} does not fit this configuration (checkpoint vs config): {}",
                    path.display(),
                    diff.join(", ")
                )));
            }
            Some(ParentModel { params, step })
        }
    };
    fresh_dir(dir, c.force)?;
    let mut runner = Runner::<T>::new();
    runner.verbose = true;
    let outcome = runner.run_with(plan, Some(prepared), parent)?;
    run_dir::write_run(dir, config_text, plan.seed, c.precision, groups, &outcome)?;
    for s in &outcome.scores {
        writeln!(out, "{}\t{}\t{:.2}", s.corpus, outcome.strategy, s.bleu).map_err(stdout_err)?;
    }
    Ok(())
}

pub fn translate(
    c: &Common,
    run: &Path,
    input: &Path,
    domain: Option<&str>,
    ckpts: &[PathBuf],
    out: &mut dyn Write,
) -> Result<()> {
    let info = RunInfo::read(run)?;
    let cfg = match &c.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::from_text(&read_text(&run.join(run_dir::CONFIG))?, run)?,
    };
    let tags = info.scheme.tags();
    let prepared = Prepared {
        bpe: SubwordModel::load(&run.join(run_dir::BPE), tags.clone())?,
        vocab: Vocab::load(&run.join(run_dir::VOCAB), &tags)?,
        scheme: info.scheme.clone(),
    };
    let context = match (info.conditioning, domain) {
        (Conditioning::Plain, _) => DecodeContext::None,
        (_, None) => {
            let names: Vec<&str> = info.groups.iter().map(|g| g.name.as_str()).collect();
            return Err(Error::Context(format!(
                "`{}` models condition on the domain; pass --domain with one of {}",
                info.strategy,
                names.join(", ")
            )));
        }
        (conditioning, Some(name)) => {
            let g = info.group(name)?;
            decode_context(&prepared, conditioning, g.group, &g.tgt_lang)?
        }
    };
    let files = if ckpts.is_empty() {
        info.final_checkpoints()?
    } else {
        ckpts.to_vec()
    };
    let sentences: Vec<Sentence> = read_text(input)?.lines().map(tokenize).collect();
    let lines = match c.precision {
        64 => translate_as::<f64>(&files, &cfg, &prepared, &context, &sentences)?,
        _ => translate_as::<f32>(&files, &cfg, &prepared, &context, &sentences)?,
    };
    let text: String = lines.iter().map(|l| format!("{l}\n")).collect();
    match &c.out {
        Some(path) => write_text(path, &text),
        None => out.write_all(text.as_bytes()).map_err(stdout_err),
    }
}

fn translate_as<T: Float>(
    files: &[PathBuf],
    cfg: &ExperimentConfig,
    prepared: &Prepared,
    context: &DecodeContext,
    sentences: &[Sentence],
) -> Result<Vec<String>> {
    let mut loaded = files
        .iter()
        .map(|f| checkpoint::load::<T>(f))
        .collect::<Result<Vec<(u64, ModelParams<T>)>>>()?;
    loaded.sort_by_key(|(step, _)| *step);
    let mut set = CheckpointSet::new();
    for (step, params) in loaded {
        set.push(step, params)?;
    }
    let model = average_checkpoints(&set, cfg.decoding.last_k.min(set.len()))?;
    let filled: Vec<Sentence> = sentences.iter().filter(|s| !s.is_empty()).cloned().collect();
    let eval = EvalSet::from_sources(&filled, context, prepared);
    let hyps = eval.beam(&model, &cfg.decoding.beam)?;
    let detok = Detokenizer {
        vocab: &prepared.vocab,
        bpe: &prepared.bpe,
        scheme: &prepared.scheme,
    };
    let mut hyps = hyps.iter().map(|h| detok.words(h).join(" "));
    Ok(sentences
        .iter()
        .map(|s| if s.is_empty() { String::new() } else { hyps.next().unwrap_or_default() })
        .collect())
}

/// Corpus BLEU of two line-aligned files.
pub fn bleu_files(hyp: &Path, reference: &Path) -> Result<f64> {
    let read = |p: &Path| -> Result<Vec<Sentence>> { Ok(read_text(p)?.lines().map(tokenize).collect()) };
    let (h, r) = (read(hyp)?, read(reference)?);
    if h.len() != r.len() {
        return Err(Error::Data(format!(
            "{} has {} lines but {} has {}",
            hyp.display(),
            h.len(),
            reference.display(),
            r.len()
        )));
    }
    bleu4(&h, &r)
}

/// One row per (test set, run) with test outputs; test sets in group order,
/// runs in argument order.
pub fn report(runs: &[PathBuf], out: &mut dyn Write) -> Result<()> {
    let infos = runs.iter().map(|r| RunInfo::read(r)).collect::<Result<Vec<_>>>()?;
    let hyp = |info: &RunInfo, set: &str| info.dir.join("test").join(format!("{set}.hyp"));
    let mut sets: Vec<String> = Vec::new();
    for info in &infos {
        let mut groups = info.groups.clone();
        groups.sort_by_key(|g| g.group);
        for g in groups {
            if hyp(info, &g.name).exists() && !sets.contains(&g.name) {
                sets.push(g.name);
            }
        }
    }
    let mut table = String::from("test_set\tstrategy\tbleu\n");
    for set in &sets {
        for info in &infos {
            let h = hyp(info, set);
            if h.exists() {
                let bleu = bleu_files(&h, &info.dir.join("test").join(format!("{set}.ref")))?;
                table.push_str(&format!("{set}\t{}\t{bleu:.2}\n", info.strategy));
            }
        }
    }
    out.write_all(table.as_bytes()).map_err(stdout_err)
}
