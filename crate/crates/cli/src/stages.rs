//! Pipeline stages and their on-disk artifacts.

use std::fs;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use semfuzz_core::eval::{self, BenchmarkRule, MetricReport};
use semfuzz_core::ingest::{MessageTypeList, SeedCorpus};
use semfuzz_core::llm::{par_map, Gateway};
use semfuzz_core::message::ProtocolId;
use semfuzz_core::rules::{self, SemanticRule, SkippedUnit, SpecificationRequirement};
use semfuzz_core::strategy::{gen_strategies, MutationStrategy};
use semfuzz_core::testcase::{self, CaseManifest};
use semfuzz_core::SCHEMA_VERSION;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RulesArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub paragraphs: usize,
    pub requirements: Vec<SpecificationRequirement>,
    pub rules: Vec<SemanticRule>,
    pub skipped: Vec<SkippedUnit>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategiesArtifact {
    pub schema_version: u32,
    pub config_hash: String,
    pub strategies: Vec<MutationStrategy>,
    pub skipped: Vec<SkippedUnit>,
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn load_inputs(types: &Path, seeds: &Path) -> Result<(MessageTypeList, SeedCorpus)> {
    let types = MessageTypeList::load(types)?;
    let corpus = SeedCorpus::load_dir(seeds, &types)?;
    log::info!(
        "{} seeds loaded, {} capture frames skipped",
        corpus.entries.len(),
        corpus.skipped
    );
    Ok((types, corpus))
}

fn rfc_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

/// Types of the protocols an RFC file is likely about, guessed from its
/// requirement vocabulary; all types when nothing stands out.
fn types_for(doc: &str, types: &MessageTypeList) -> MessageTypeList {
    let lower = doc.to_ascii_lowercase();
    let hits: Vec<ProtocolId> = [
        (ProtocolId::Dns, ["dns", "qname", "resolver"]),
        (ProtocolId::Tls13, ["clienthello", "handshake", "tls"]),
        (
            ProtocolId::Http1,
            ["http/1.1", "header field", "request-target"],
        ),
        (
            ProtocolId::Ipv6,
            ["ipv6", "extension header", "next header"],
        ),
    ]
    .into_iter()
    .filter(|(_, words)| words.iter().any(|w| lower.contains(w)))
    .map(|(p, _)| p)
    .collect();
    if hits.is_empty() {
        return types.clone();
    }
    MessageTypeList {
        types: types
            .types
            .iter()
            .filter(|t| hits.contains(&t.protocol))
            .cloned()
            .collect(),
    }
}

pub fn extract_rules(
    gw: &Gateway,
    rfcs: &[impl AsRef<Path>],
    types: &MessageTypeList,
    corpus: &SeedCorpus,
    hash: &str,
) -> Result<RulesArtifact> {
    let mut art = RulesArtifact {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.to_string(),
        paragraphs: 0,
        requirements: Vec::new(),
        rules: Vec::new(),
        skipped: Vec::new(),
    };
    if rfcs.is_empty() {
        bail!("no RFC documents given");
    }
    for path in rfcs {
        let path = path.as_ref();
        let doc =
            fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let build = rules::build_rules(gw, &doc, &rfc_name(path), &types_for(&doc, types), corpus);
        log::info!(
            "{}: {} paragraphs, {} requirements, {} rules",
            path.display(),
            build.paragraphs,
            build.requirements.len(),
            build.rules.len()
        );
        art.paragraphs += build.paragraphs;
        art.requirements.extend(build.requirements);
        art.rules.extend(build.rules);
        art.skipped.extend(build.skipped);
    }
    rules::assign_ids(&mut art.rules);
    Ok(art)
}

pub fn generate_strategies(
    gw: &Gateway,
    rules: &[SemanticRule],
    cap: usize,
    hash: &str,
) -> StrategiesArtifact {
    let mut art = StrategiesArtifact {
        schema_version: SCHEMA_VERSION,
        config_hash: hash.to_string(),
        strategies: Vec::new(),
        skipped: Vec::new(),
    };
    let (testable, untestable): (Vec<&SemanticRule>, Vec<&SemanticRule>) =
        rules.iter().partition(|r| r.testable);
    for r in untestable {
        art.skipped.push(SkippedUnit {
            stage: "strategies".into(),
            unit: r.id.clone(),
            reason: format!("no seed of type {:?}", r.message_type),
        });
    }
    let results = par_map(&testable, gw.concurrency, |r| gen_strategies(gw, r, cap));
    for (r, res) in testable.iter().zip(results) {
        match res {
            Ok(list) => art.strategies.extend(list),
            Err(e) => art.skipped.push(SkippedUnit {
                stage: "strategies".into(),
                unit: r.id.clone(),
                reason: e.to_string(),
            }),
        }
    }
    art
}

/// Generate and write the case directory, replacing an earlier case set there.
pub fn generate_cases(
    gw: &Gateway,
    strategies: &[MutationStrategy],
    corpus: &SeedCorpus,
    dir: &Path,
    hash: &str,
) -> Result<CaseManifest> {
    if dir.join("manifest.json").exists() {
        fs::remove_dir_all(dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    let batch = testcase::gen_cases(gw, strategies, corpus);
    Ok(testcase::write_cases(dir, &batch, hash)?)
}

/// Benchmark files are either a bare array or an envelope with `rules`.
pub fn load_benchmark(path: &Path) -> Result<Vec<BenchmarkRule>> {
    let v: Value = read_json(path)?;
    let rules = match v {
        Value::Array(_) => v,
        Value::Object(mut m) => m
            .remove("rules")
            .context("benchmark has no \"rules\" array")?,
        _ => bail!("benchmark must be an array or an object with \"rules\""),
    };
    Ok(serde_json::from_value(rules)?)
}

pub fn load_rules(path: &Path) -> Result<Vec<SemanticRule>> {
    let v: Value = read_json(path)?;
    let rules = match v {
        Value::Array(_) => v,
        Value::Object(mut m) => m
            .remove("rules")
            .context("rules file has no \"rules\" array")?,
        _ => bail!("rules file must be an array or an object with \"rules\""),
    };
    Ok(serde_json::from_value(rules)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RuleEvalReport {
    pub matcher: String,
    pub threshold: f64,
    pub extracted: usize,
    pub benchmark: usize,
    #[serde(flatten)]
    pub metrics: MetricReport,
}

pub fn eval_rules(
    extracted: &[SemanticRule],
    bench: &[BenchmarkRule],
    threshold: f64,
) -> RuleEvalReport {
    RuleEvalReport {
        matcher: eval::MATCHER.to_string(),
        threshold,
        extracted: extracted.len(),
        benchmark: bench.len(),
        metrics: eval::score_rules(extracted, bench, threshold),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn protocol_guess_narrows_types() {
        let types = MessageTypeList {
            types: vec![
                semfuzz_core::ingest::MessageTypeSpec {
                    protocol: ProtocolId::Dns,
                    name: "DNS Query".into(),
                },
                semfuzz_core::ingest::MessageTypeSpec {
                    protocol: ProtocolId::Tls13,
                    name: "ClientHello with No Extension".into(),
                },
            ],
        };
        assert_eq!(
            types_for("The ClientHello carries", &types).names(),
            vec!["ClientHello with No Extension"]
        );
        assert_eq!(types_for("nothing relevant", &types).names().len(), 2);
    }
}
