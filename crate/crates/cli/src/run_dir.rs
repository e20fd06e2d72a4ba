//! Layout of a training run directory.
//!
//! ```text
//! experiment.conf          copy of the configuration
//! run.manifest             strategy, seed, tag scheme, groups, stages, scores
//! vocab.txt  bpe.txt       preprocessing of the final stage
//! trace.<stage>.tsv        dev-BLEU trace of each stage
//! checkpoints/<stage>/     kept snapshots, one file per evaluation step
//! handoff.<stage>.ckpt     weights each stage passed on or was tested with
//! model.ckpt               average of the final stage's kept snapshots
//! test/<corpus>.hyp .ref   beam output and references per test set
//! scores.tsv               test set, strategy, BLEU
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use mdnmt::corpus::parse_key_values;
use mdnmt::corpus::TagScheme;
use mdnmt::heads::GroupId;
use mdnmt::strategy::{trace_tsv, Conditioning, RunOutcome, StrategyKind};
use mdnmt::tensor::Float;
use mdnmt::{Error, Result};

use crate::checkpoint;

pub const MANIFEST: &str = "run.manifest";
pub const CONFIG: &str = "experiment.conf";
pub const VOCAB: &str = "vocab.txt";
pub const BPE: &str = "bpe.txt";
pub const MODEL: &str = "model.ckpt";
pub const SCORES: &str = "scores.tsv";

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        create_dir(dir)?;
    }
    fs::write(path, text).map_err(|e| Error::Data(format!("cannot write {}: {e}", path.display())))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Data(format!("cannot read {}: {e}", path.display())))
}

pub fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::Data(format!("cannot create {}: {e}", dir.display())))
}

/// Creates `dir`, refusing to reuse a non-empty one unless `force`, in which
/// case its previous contents are removed.
pub fn fresh_dir(dir: &Path, force: bool) -> Result<()> {
    let occupied = fs::read_dir(dir).map(|mut d| d.next().is_some()).unwrap_or(false);
    if occupied {
        if !force {
            return Err(Error::Data(format!(
                "refusing to overwrite non-empty {}; pass --force to replace it",
                dir.display()
            )));
        }
        fs::remove_dir_all(dir).map_err(|e| Error::Data(format!("cannot clear {}: {e}", dir.display())))?;
    }
    create_dir(dir)
}

fn lines(rows: &[Vec<String>]) -> String {
    rows.iter().map(|r| r.join(" ") + "\n").collect()
}

/// One corpus group as recorded in a run manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct GroupEntry {
    pub group: GroupId,
    pub name: String,
    pub src_lang: String,
    pub tgt_lang: String,
}

/// What later commands need to know about a finished run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunInfo {
    pub dir: PathBuf,
    pub strategy: StrategyKind,
    pub conditioning: Conditioning,
    pub scheme: TagScheme,
    pub groups: Vec<GroupEntry>,
    pub final_stage: String,
}

impl RunInfo {
    pub fn read(dir: &Path) -> Result<Self> {
        let kv = parse_key_values(&read_text(&dir.join(MANIFEST))?)?;
        let get = |k: &str| -> Result<&str> {
            kv.iter()
                .find(|(key, _)| key == k)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Data(format!("{} lacks `{k}`", dir.join(MANIFEST).display())))
        };
        let conditioning = match get("conditioning")? {
            "plain" => Conditioning::Plain,
            "tags" => Conditioning::Tags,
            "groups" => Conditioning::Groups,
            other => return Err(Error::Data(format!("unknown conditioning `{other}` in run manifest"))),
        };
        let scheme = TagScheme {
            n_domains: get("scheme.n_domains")?
                .parse()
                .map_err(|_| Error::Data("bad scheme.n_domains in run manifest".into()))?,
            target_langs: get("scheme.target_langs")?.split(',').map(str::to_owned).collect(),
            include_lang_tag: get("scheme.lang_tags")? == "true",
        };
        let mut groups = Vec::new();
        for (k, v) in &kv {
            if let Some(id) = k.strip_prefix("group.") {
                let id: usize = id.parse().map_err(|_| Error::Data(format!("bad group key `{k}`")))?;
                let parts: Vec<&str> = v.split_whitespace().collect();
                let [name, src, tgt] = parts.as_slice() else {
                    return Err(Error::Data(format!("bad group entry `{v}`")));
                };
                groups.push(GroupEntry {
                    group: GroupId::new(id, u16::MAX as usize)?,
                    name: name.to_string(),
                    src_lang: src.to_string(),
                    tgt_lang: tgt.to_string(),
                });
            }
        }
        Ok(Self {
            dir: dir.to_owned(),
            strategy: get("strategy")?.parse()?,
            conditioning,
            scheme,
            groups,
            final_stage: get("final_stage")?.to_owned(),
        })
    }

    pub fn group(&self, name: &str) -> Result<&GroupEntry> {
        self.groups.iter().find(|g| g.name == name).ok_or_else(|| {
            let names: Vec<&str> = self.groups.iter().map(|g| g.name.as_str()).collect();
            Error::Context(format!("domain `{name}` is not a corpus of this run ({})", names.join(", ")))
        })
    }

    /// Kept snapshots of the final stage in step order.
    pub fn final_checkpoints(&self) -> Result<Vec<PathBuf>> {
        let dir = self.dir.join("checkpoints").join(&self.final_stage);
        let mut files: Vec<PathBuf> = fs::read_dir(&dir)
            .map_err(|e| Error::Checkpoint(format!("cannot list {}: {e}", dir.display())))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "ckpt"))
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Checkpoint(format!("no checkpoints in {}", dir.display())));
        }
        Ok(files)
    }
}

pub fn conditioning_name(c: Conditioning) -> &'static str {
    match c {
        Conditioning::Plain => "plain",
        Conditioning::Tags => "tags",
        Conditioning::Groups => "groups",
    }
}

/// Writes every artifact of `outcome` into `dir`.
pub fn write_run<T: Float>(
    dir: &Path,
    config_text: &str,
    seed: u64,
    precision: u32,
    groups: &[GroupEntry],
    outcome: &RunOutcome<T>,
) -> Result<()> {
    write_text(&dir.join(CONFIG), config_text)?;
    outcome.prepared.vocab.save(&dir.join(VOCAB))?;
    outcome.prepared.bpe.save(&dir.join(BPE))?;
    let scheme = &outcome.prepared.scheme;
    let mut manifest = format!(
        "strategy={}\nseed={seed}\nprecision={precision}\nconditioning={}\nscheme.n_domains={}\nscheme.target_langs={}\nscheme.lang_tags={}\n",
        outcome.strategy,
        conditioning_name(outcome.conditioning),
        scheme.n_domains,
        scheme.target_langs.join(","),
        scheme.include_lang_tag,
    );
    for g in groups {
        manifest.push_str(&format!("group.{}={} {} {}\n", g.group, g.name, g.src_lang, g.tgt_lang));
    }
    for (i, stage) in outcome.stages.iter().enumerate() {
        let o = &stage.outcome;
        manifest.push_str(&format!(
            "stage.{}={} pairs={} batches={} evaluations={} stop={:?}\n",
            i + 1,
            stage.label,
            stage.train_pairs,
            o.batches,
            o.trace.len(),
            o.stop,
        ));
        write_text(&dir.join(format!("trace.{}.tsv", stage.label)), &trace_tsv(&o.trace))?;
        let ckpt_dir = dir.join("checkpoints").join(&stage.label);
        create_dir(&ckpt_dir)?;
        for (step, params) in &o.checkpoints.snapshots {
            checkpoint::save(&ckpt_dir.join(format!("{step:010}.ckpt")), *step, params)?;
        }
        let last = o.checkpoints.last().map_or(0, |(s, _)| *s);
        checkpoint::save(&dir.join(format!("handoff.{}.ckpt", stage.label)), last, &stage.handoff)?;
    }
    let last = outcome.stages.last().expect("a run has a stage");
    manifest.push_str(&format!("final_stage={}\n", last.label));
    let step = last.outcome.checkpoints.last().map_or(0, |(s, _)| *s);
    checkpoint::save(&dir.join(MODEL), step, &outcome.model)?;
    let mut scores = String::from("test_set\tstrategy\tbleu\n");
    for s in &outcome.scores {
        write_text(&dir.join("test").join(format!("{}.hyp", s.corpus)), &lines(&s.hypotheses))?;
        write_text(&dir.join("test").join(format!("{}.ref", s.corpus)), &lines(&s.references))?;
        scores.push_str(&format!("{}\t{}\t{:.2}\n", s.corpus, outcome.strategy, s.bleu));
        manifest.push_str(&format!("score.{}={:.4}\n", s.corpus, s.bleu));
    }
    write_text(&dir.join(SCORES), &scores)?;
    write_text(&dir.join(MANIFEST), &manifest)
}
