use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;

use cfdiag_core::emulator::{gen_dataset, read_manifest, ClassPlan, DatasetSpec, TcpVariant, TransferConfig};
use cfdiag_core::flow::signature_feature_names;
use cfdiag_core::network::{diagnose, evaluate, load_models, train_cf_classifier, CfModel, TrainConfig};
use cfdiag_core::pcap::{read_pcap, PacketRecord};
use cfdiag_core::sigdb::{parse_labels, ClassLabel, LinkMeta, Signature, SignatureDb, SignatureMeta};
use cfdiag_core::signature_from_traces;

#[derive(Debug, Parser)]
#[command(
    name = "cfdiag",
    version,
    about = "Diagnose client-side TCP faults from a client/server trace pair"
)]
pub struct Cli {
    /// Master seed for dataset generation and cross-validation folds.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, short, global = true)]
    pub verbose: bool,
    /// Print structured JSON instead of tables.
    #[arg(long, global = true)]
    pub json: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Emulate a labelled dataset: pcap pairs plus a manifest.
    Gen(GenArgs),
    /// Append the signature of a pcap pair (or every manifest entry) to a database.
    Extract(ExtractArgs),
    /// Train per-fault classifiers from a signature database.
    Train(TrainArgs),
    /// Diagnose a pcap pair with a directory of trained models.
    Diagnose(DiagnoseArgs),
    /// Score trained models against a generated manifest.
    Evaluate(EvaluateArgs),
    /// Dump the features of a pcap pair or the metadata of a model.
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[arg(long)]
    out: PathBuf,
    /// Samples per class for the healthy class and each single fault.
    #[arg(long, default_value_t = 11)]
    per_class: usize,
    /// Additional samples with simultaneous read and write buffer limits.
    #[arg(long, default_value_t = 0)]
    multi: usize,
    #[arg(long, default_value = "reno")]
    variant: String,
    /// Response size sent by the server.
    #[arg(long, default_value_t = 200_000)]
    bytes: u64,
    #[arg(long, default_value_t = 100_000)]
    request_bytes: u64,
    /// Prefix for sample ids.
    #[arg(long, default_value = "sample")]
    name: String,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    #[arg(long)]
    db: PathBuf,
    #[arg(long, required_unless_present = "manifest", requires = "server")]
    client: Option<PathBuf>,
    #[arg(long, requires = "client")]
    server: Option<PathBuf>,
    /// Comma-separated labels such as `cf_0` or `cf_3,cf_4`.
    #[arg(long, required_unless_present = "manifest")]
    labels: Option<String>,
    /// Row id; defaults to the client pcap's file stem.
    #[arg(long)]
    id: Option<String>,
    #[arg(long, default_value = "unknown")]
    variant: String,
    /// Extract every entry of a generated manifest instead of one pair.
    #[arg(long, conflicts_with_all = ["client", "server", "labels", "id"])]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    db: PathBuf,
    /// Fault to train (repeatable); defaults to every single fault in the database.
    #[arg(long)]
    fault: Vec<String>,
    /// Model file when one fault is given with a `.json` path, otherwise a directory.
    #[arg(long)]
    out: PathBuf,
    /// Also print the cross-validation table.
    #[arg(long)]
    report: bool,
    #[arg(long, default_value_t = 30)]
    q_max: usize,
    #[arg(long, default_value_t = 5)]
    folds: usize,
    #[arg(long = "C", default_value_t = 10.0)]
    c: f64,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    client: PathBuf,
    #[arg(long)]
    server: PathBuf,
    #[arg(long)]
    models: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    models: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[arg(long, requires = "server", required_unless_present = "model")]
    client: Option<PathBuf>,
    #[arg(long, requires = "client")]
    server: Option<PathBuf>,
    #[arg(long, conflicts_with_all = ["client", "server"])]
    model: Option<PathBuf>,
}

pub enum Outcome {
    Success,
    FaultsFound,
}

pub fn run(cli: Cli) -> Result<Outcome> {
    let ctx = Ctx {
        seed: cli.seed,
        json: cli.json,
    };
    match cli.command {
        Command::Gen(a) => ctx.gen(a),
        Command::Extract(a) => ctx.extract(a),
        Command::Train(a) => ctx.train(a),
        Command::Diagnose(a) => ctx.diagnose(a),
        Command::Evaluate(a) => ctx.evaluate(a),
        Command::Inspect(a) => ctx.inspect(a),
    }
}

struct Ctx {
    seed: u64,
    json: bool,
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn load_packets(path: &Path) -> Result<Vec<PacketRecord>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    let trace = read_pcap(&bytes).with_context(|| format!("parsing {}", path.display()))?;
    if trace.skipped > 0 {
        log::info!("{}: skipped {} non-TCP records", path.display(), trace.skipped);
    }
    Ok(trace.packets)
}

fn parse_fault(s: &str) -> Result<ClassLabel> {
    let label: ClassLabel = s.parse().map_err(|e| anyhow::anyhow!("{e}"))?;
    if label.is_healthy() {
        bail!("cf_0 is the healthy class and has no classifier");
    }
    Ok(label)
}

fn unknown_meta(variant: &str) -> SignatureMeta {
    SignatureMeta {
        tcp_variant: variant.to_string(),
        link: LinkMeta {
            rate_Mbps: 0.0,
            delay_ms: 0.0,
            loss_pct: 0.0,
        },
        transfer_bytes: 0,
        seed: 0,
    }
}

impl Ctx {
    fn gen(&self, a: GenArgs) -> Result<Outcome> {
        let variant: TcpVariant = a.variant.parse()?;
        let transfer = TransferConfig {
            bytes_to_send: a.bytes,
            request_bytes: a.request_bytes,
            tcp_variant: variant,
            ..Default::default()
        };
        transfer.validate()?;
        let mut spec = DatasetSpec::single_faults(&a.name, a.per_class, transfer, self.seed);
        spec.classes.retain(|c| c.count > 0);
        if a.multi > 0 {
            spec.classes.push(ClassPlan::new(
                [ClassLabel::READ_BUFFER_LIMITED, ClassLabel::WRITE_BUFFER_LIMITED],
                a.multi,
            ));
        }
        if spec.total() == 0 {
            bail!("nothing to generate: --per-class and --multi are both 0");
        }
        let entries = gen_dataset(&spec, &a.out)?;
        let stalled = entries.iter().filter(|e| e.stalled).count();
        if self.json {
            print_json(&serde_json::json!({
                "out": a.out,
                "samples": entries.len(),
                "stalled": stalled,
                "redraws": entries.iter().map(|e| e.redraws).sum::<u64>(),
            }))?;
        } else {
            println!("wrote {} samples to {}", entries.len(), a.out.display());
            if stalled > 0 {
                println!("{stalled} transfers hit the simulated-time cap");
            }
        }
        Ok(Outcome::Success)
    }

    fn extract(&self, a: ExtractArgs) -> Result<Outcome> {
        if let Some(manifest) = a.manifest {
            let entries = read_manifest(&manifest)?;
            let base = manifest.parent().unwrap_or(Path::new("."));
            let sigs = entries
                .par_iter()
                .map(|e| {
                    let client = load_packets(&base.join(&e.client_pcap))?;
                    let server = load_packets(&base.join(&e.server_pcap))?;
                    let v = signature_from_traces(&client, &server).with_context(|| e.id.clone())?;
                    Ok(Signature::new(e.id.clone(), e.labels.clone(), e.meta.clone(), v))
                })
                .collect::<Result<Vec<_>>>()?;
            let mut db = if a.db.exists() {
                SignatureDb::load(&a.db)?
            } else {
                SignatureDb::new()
            };
            let n = sigs.len();
            for s in sigs {
                db.append(s)?;
            }
            db.save(&a.db)?;
            self.report_extract(n, &a.db, db.len())
        } else {
            let (client_path, server_path) = (a.client.expect("required by clap"), a.server.expect("required by clap"));
            let labels =
                parse_labels(a.labels.as_deref().expect("required by clap")).map_err(|e| anyhow::anyhow!("{e}"))?;
            let id = match a.id {
                Some(id) => id,
                None => client_path
                    .file_stem()
                    .map(|s| s.to_string_lossy().trim_end_matches("_client").to_string())
                    .context("cannot derive an id from the client path; pass --id")?,
            };
            let v = signature_from_traces(&load_packets(&client_path)?, &load_packets(&server_path)?)?;
            SignatureDb::append_to_file(&a.db, Signature::new(id, labels, unknown_meta(&a.variant), v))?;
            let rows = SignatureDb::load(&a.db)?.len();
            self.report_extract(1, &a.db, rows)
        }
    }

    fn report_extract(&self, added: usize, db: &Path, rows: usize) -> Result<Outcome> {
        if self.json {
            print_json(&serde_json::json!({ "db": db, "added": added, "rows": rows }))?;
        } else {
            println!("appended {added} signature(s) to {} ({rows} rows)", db.display());
        }
        Ok(Outcome::Success)
    }

    fn train(&self, a: TrainArgs) -> Result<Outcome> {
        let config = TrainConfig {
            c: a.c,
            q_max: a.q_max,
            folds: a.folds,
            seed: self.seed,
            ..Default::default()
        };
        let requested = a.fault.iter().map(|f| parse_fault(f)).collect::<Result<Vec<_>>>()?;
        let db = SignatureDb::load(&a.db).with_context(|| format!("loading {}", a.db.display()))?;
        let faults = if requested.is_empty() {
            db.single_faults()
        } else {
            requested
        };
        if faults.is_empty() {
            bail!("the database has no single-fault rows to train on");
        }
        let single_file = faults.len() == 1 && a.out.extension().is_some_and(|e| e == "json");

        let models = faults
            .par_iter()
            .map(|&f| train_cf_classifier(&db, f, &config).with_context(|| format!("training {f}")))
            .collect::<Result<Vec<_>>>()?;
        let mut paths = Vec::new();
        if single_file {
            models[0].save(&a.out)?;
            paths.push(a.out.clone());
        } else {
            fs::create_dir_all(&a.out)?;
            for m in &models {
                paths.push(m.save_in(&a.out)?);
            }
        }

        if self.json {
            let summary: Vec<_> = models
                .iter()
                .zip(&paths)
                .map(|(m, p)| {
                    let mut v = serde_json::json!({
                        "fault": m.fault,
                        "path": p,
                        "q": m.features.len(),
                        "features": m.feature_names,
                        "converged": m.svm.converged,
                    });
                    if a.report {
                        v["cv_table"] = serde_json::to_value(&m.training_meta.cv_table).expect("serializable");
                    }
                    v
                })
                .collect();
            print_json(&summary)?;
        } else {
            for (m, p) in models.iter().zip(&paths) {
                println!(
                    "{} ({}): q={} -> {}",
                    m.fault,
                    m.fault.description(),
                    m.features.len(),
                    p.display()
                );
                println!("  features: {}", m.feature_names.join(", "));
                if !m.svm.converged {
                    println!("  warning: solver stopped at the iteration cap");
                }
                if a.report {
                    println!("  q   mean_acc  folds");
                    for row in &m.training_meta.cv_table {
                        let folds: Vec<String> = row.fold_accuracies.iter().map(|x| format!("{x:.2}")).collect();
                        println!("  {:<3} {:.4}    {}", row.q, row.mean_accuracy, folds.join(" "));
                    }
                }
            }
        }
        Ok(Outcome::Success)
    }

    fn diagnose(&self, a: DiagnoseArgs) -> Result<Outcome> {
        let models = load_models(&a.models)?;
        let client = load_packets(&a.client)?;
        let server = load_packets(&a.server)?;
        let mut report = diagnose(&models, &client, &server)?;
        report
            .input
            .insert("client_pcap".into(), a.client.display().to_string());
        report
            .input
            .insert("server_pcap".into(), a.server.display().to_string());
        if self.json {
            print_json(&report)?;
        } else {
            for e in &report.entries {
                let verdict = if e.verdict > 0 { "FAULT" } else { "ok" };
                println!(
                    "{:<6} {:<22} {:>+9.4}  {verdict}",
                    e.fault.to_string(),
                    e.fault.description(),
                    e.decision_value
                );
            }
            if report.healthy {
                println!("diagnosis: healthy");
            } else {
                let found: Vec<String> = report
                    .collective
                    .iter()
                    .map(|l| format!("{l} ({})", l.description()))
                    .collect();
                println!("diagnosis: {}", found.join(", "));
            }
            println!("note: {}", report.caveat);
        }
        Ok(if report.healthy {
            Outcome::Success
        } else {
            Outcome::FaultsFound
        })
    }

    fn evaluate(&self, a: EvaluateArgs) -> Result<Outcome> {
        let models = load_models(&a.models)?;
        let entries = read_manifest(&a.manifest)?;
        let base = a.manifest.parent().unwrap_or(Path::new("."));
        let sigs = entries
            .par_iter()
            .map(|e| {
                let v = signature_from_traces(
                    &load_packets(&base.join(&e.client_pcap))?,
                    &load_packets(&base.join(&e.server_pcap))?,
                )?;
                Ok(Signature::new(e.id.clone(), e.labels.clone(), e.meta.clone(), v))
            })
            .collect::<Result<Vec<_>>>()?;
        let report = evaluate(&models, &sigs)?;
        if self.json {
            print_json(&report)?;
        } else {
            print!("{}", report.table());
        }
        Ok(Outcome::Success)
    }

    fn inspect(&self, a: InspectArgs) -> Result<Outcome> {
        if let Some(path) = a.model {
            let m = CfModel::load(&path)?;
            if self.json {
                print_json(&serde_json::json!({
                    "fault": m.fault,
                    "features": m.feature_names,
                    "kernel": m.svm.kernel,
                    "C": m.svm.c,
                    "support_vectors": m.svm.support_vectors.len(),
                    "converged": m.svm.converged,
                    "training_meta": m.training_meta,
                }))?;
            } else {
                println!("fault:           {} ({})", m.fault, m.fault.description());
                println!("features (q={}):  {}", m.features.len(), m.feature_names.join(", "));
                println!("kernel:          {:?}, C = {}", m.svm.kernel, m.svm.c);
                println!("support vectors: {}", m.svm.support_vectors.len());
                println!("converged:       {}", m.svm.converged);
                let t = &m.training_meta;
                println!(
                    "trained on:      {} healthy + {} faulty rows (db {})",
                    t.healthy_samples, t.fault_samples, t.db_hash
                );
                println!("catalog version: {}", t.catalog_version);
            }
            return Ok(Outcome::Success);
        }
        let client = load_packets(a.client.as_deref().expect("required by clap"))?;
        let server = load_packets(a.server.as_deref().expect("required by clap"))?;
        let v = signature_from_traces(&client, &server)?;
        let names = signature_feature_names();
        if self.json {
            let map: serde_json::Map<String, serde_json::Value> = names
                .into_iter()
                .zip(&v.x)
                .map(|(n, x)| (n, serde_json::json!(x)))
                .collect();
            print_json(&serde_json::json!({ "catalog_version": v.catalog_version, "features": map }))?;
        } else {
            for (n, x) in names.iter().zip(&v.x) {
                println!("{n:<34} {x}");
            }
        }
        Ok(Outcome::Success)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn clap_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn healthy_class_has_no_classifier() {
        assert!(parse_fault("cf_0").is_err());
        assert!(parse_fault("sack").is_err());
        assert_eq!(parse_fault("cf_2").unwrap(), ClassLabel::DSACK_DISABLED);
    }

    #[test]
    fn extract_modes_are_exclusive() {
        assert!(
            Cli::try_parse_from(["cfdiag", "extract", "--db", "d", "--manifest", "m", "--labels", "cf_0"]).is_err()
        );
        assert!(Cli::try_parse_from([
            "cfdiag", "extract", "--db", "d", "--client", "c", "--server", "s", "--labels", "cf_0"
        ])
        .is_ok());
        assert!(Cli::try_parse_from(["cfdiag", "extract", "--db", "d", "--client", "c", "--labels", "cf_0"]).is_err());
    }
}
