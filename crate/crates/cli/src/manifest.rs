//! Experiment manifests: a TOML file with a shared `base` table that is
//! deep-merged under each `[[variants]]` table.
//!
//! ```toml
//! schema_version = 1
//! name = "loss-comparison"
//! output_dir = "runs/loss-comparison"   # relative to the manifest file
//! global_seed = 7
//!
//! [base]
//! iterations = 2000
//!
//! [[variants]]
//! name = "softmax"
//! seed_name = "pair"                    # optional, defaults to name
//! loss = "softmax"
//! ```

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use rangekit::seed::derive_seed;
use rangekit::TrainConfig;
use serde::Deserialize;
use toml::{Table, Value};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawManifest {
    schema_version: u32,
    name: String,
    output_dir: Option<PathBuf>,
    global_seed: u64,
    #[serde(default)]
    base: Table,
    #[serde(default)]
    variants: Vec<Table>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub name: String,
    pub seed_name: String,
    pub config: TrainConfig,
}

#[derive(Debug, Clone)]
pub struct Manifest {
    pub name: String,
    pub output_dir: PathBuf,
    pub global_seed: u64,
    pub base: Table,
    pub raw_variants: Vec<Table>,
    pub variants: Vec<Variant>,
}

/// Every problem found in a manifest, one per line.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestError(pub Vec<String>);

impl std::fmt::Display for ManifestError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "invalid manifest:")?;
        for e in &self.0 {
            writeln!(f, "  - {e}")?;
        }
        Ok(())
    }
}

impl std::error::Error for ManifestError {}

/// `overlay` wins; nested tables merge key by key.
pub fn deep_merge(mut base: Table, overlay: &Table) -> Table {
    for (k, v) in overlay {
        match (base.get_mut(k), v) {
            (Some(Value::Table(b)), Value::Table(o)) => {
                let merged = deep_merge(std::mem::take(b), o);
                *b = merged;
            }
            _ => {
                base.insert(k.clone(), v.clone());
            }
        }
    }
    base
}

fn has_path(t: &Table, path: &[&str]) -> bool {
    match path {
        [] => true,
        [last] => t.contains_key(*last),
        [head, rest @ ..] => matches!(t.get(*head), Some(Value::Table(inner)) if has_path(inner, rest)),
    }
}

fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name != "."
        && name != ".."
        && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '-' | '_' | '.' | '@'))
}

/// Resolves one variant table. Seeds not set explicitly are derived from
/// `derive_seed(global_seed, seed_name)`.
pub fn resolve_variant(global_seed: u64, base: &Table, table: &Table) -> Result<Variant, Vec<String>> {
    let mut errors = Vec::new();
    let mut table = table.clone();
    let name = match table.remove("name") {
        Some(Value::String(s)) => s,
        Some(other) => {
            errors.push(format!("variant name must be a string, got {other}"));
            String::new()
        }
        None => {
            errors.push("variant without a name".to_string());
            String::new()
        }
    };
    let label = if name.is_empty() { "<unnamed>".to_string() } else { name.clone() };
    if !name.is_empty() && !valid_name(&name) {
        errors.push(format!("variant '{label}': name may only contain ASCII letters, digits and - _ . @"));
    }
    let seed_name = match table.remove("seed_name") {
        Some(Value::String(s)) => s,
        Some(other) => {
            errors.push(format!("variant '{label}': seed_name must be a string, got {other}"));
            name.clone()
        }
        None => name.clone(),
    };

    let merged = deep_merge(base.clone(), &table);
    let config: Option<TrainConfig> = match merged.clone().try_into() {
        Ok(c) => Some(c),
        Err(e) => {
            errors.push(format!("variant '{label}': {}", e.message().trim()));
            None
        }
    };
    let Some(mut config) = config else {
        return Err(errors);
    };

    let master = derive_seed(global_seed, &seed_name);
    let derived = TrainConfig::default().with_master_seed(master);
    if !has_path(&merged, &["dataset", "seed"]) {
        config.dataset.seed = derived.dataset.seed;
    }
    if !has_path(&merged, &["truncate_seed"]) {
        config.truncate_seed = derived.truncate_seed;
    }
    if !has_path(&merged, &["batch", "seed"]) {
        config.batch.seed = derived.batch.seed;
    }
    if !has_path(&merged, &["init_seed"]) {
        config.init_seed = derived.init_seed;
    }
    if !has_path(&merged, &["eval", "seed"]) {
        config.eval.seed = derived.eval.seed;
    }
    if config.iterations == 0 {
        errors.push(format!("variant '{label}': iterations must be > 0"));
    }
    if let Err(e) = config.validate() {
        errors.push(format!("variant '{label}': {e}"));
    }
    if errors.is_empty() {
        Ok(Variant { name, seed_name, config })
    } else {
        Err(errors)
    }
}

fn check_unique<'a>(names: impl IntoIterator<Item = &'a str>) -> Vec<String> {
    let mut seen = BTreeSet::new();
    names
        .into_iter()
        .filter(|n| !seen.insert(*n))
        .map(|n| format!("duplicate variant name '{n}'"))
        .collect()
}

/// Parses and validates manifest text. `base_dir` anchors a relative
/// `output_dir`.
pub fn parse_manifest(text: &str, base_dir: &Path) -> Result<Manifest, ManifestError> {
    let raw: RawManifest = toml::from_str(text).map_err(|e| ManifestError(vec![e.to_string().trim().to_string()]))?;
    let mut errors = Vec::new();
    if raw.schema_version != SCHEMA_VERSION {
        errors.push(format!("schema_version {} is not supported (expected {SCHEMA_VERSION})", raw.schema_version));
    }
    if !valid_name(&raw.name) {
        errors.push(format!("manifest name '{}' may only contain ASCII letters, digits and - _ . @", raw.name));
    }
    if raw.variants.is_empty() {
        errors.push("manifest has no variants".to_string());
    }
    let mut variants = Vec::new();
    for table in &raw.variants {
        match resolve_variant(raw.global_seed, &raw.base, table) {
            Ok(v) => variants.push(v),
            Err(e) => errors.extend(e),
        }
    }
    // checked on the raw tables so that a duplicate is reported even when
    // one of its copies fails to resolve
    errors.extend(check_unique(raw.variants.iter().filter_map(|t| t.get("name").and_then(toml::Value::as_str))));
    if !errors.is_empty() {
        return Err(ManifestError(errors));
    }
    let output_dir = base_dir.join(raw.output_dir.unwrap_or_else(|| PathBuf::from("runs").join(&raw.name)));
    Ok(Manifest {
        name: raw.name,
        output_dir,
        global_seed: raw.global_seed,
        base: raw.base,
        raw_variants: raw.variants,
        variants,
    })
}

pub fn load_manifest(path: &Path) -> anyhow::Result<Manifest> {
    let text = std::fs::read_to_string(path).map_err(|e| anyhow::anyhow!("reading {}: {e}", path.display()))?;
    let dir = path.parent().unwrap_or(Path::new("."));
    Ok(parse_manifest(&text, dir)?)
}

/// One variant per (manifest variant, ratio), named `<variant>@<ratio>`.
/// Each keeps its variant's seed name, so all ratios share data and init.
pub fn expand_tail_sweep(manifest: &Manifest, ratios: &[f64]) -> Result<Vec<Variant>, ManifestError> {
    let mut errors = Vec::new();
    for r in ratios {
        if !(0.0..=1.0).contains(r) {
            errors.push(format!("ratio {r} is outside [0, 1]"));
        }
    }
    if ratios.is_empty() {
        errors.push("no ratios given".to_string());
    }
    if !errors.is_empty() {
        return Err(ManifestError(errors));
    }
    let mut out = Vec::new();
    for (table, variant) in manifest.raw_variants.iter().zip(&manifest.variants) {
        for &r in ratios {
            let mut t = table.clone();
            t.insert("name".into(), Value::String(format!("{}@{r}", variant.name)));
            t.insert("seed_name".into(), Value::String(variant.seed_name.clone()));
            t.insert("tail_ratio".into(), Value::Float(r));
            match resolve_variant(manifest.global_seed, &manifest.base, &t) {
                Ok(v) => out.push(v),
                Err(e) => errors.extend(e),
            }
        }
    }
    errors.extend(check_unique(out.iter().map(|v| v.name.as_str())));
    if errors.is_empty() {
        Ok(out)
    } else {
        Err(ManifestError(errors))
    }
}
