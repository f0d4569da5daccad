use std::fs;
use std::path::{Path, PathBuf};

use fracnet_core::analysis::{
    attention_projection_cost, count_fc_flops, ffn_cost, gradcheck, similarity_probe, Convention, ParamBreakdown,
    SimilarityReport,
};
use fracnet_core::model::{load_checkpoint, Model, ModelConfig};
use fracnet_core::numerics::Scalar;
use fracnet_core::train::{train_with, Corpus, ReportRow, RunReport, TrainConfig, TrainHooks};
use serde::Serialize;

use crate::config::{parse_variant, CliError, CliResult, Experiment, Precision};
use crate::svg::{band_chart, line_chart, Band, Series};

fn write(path: &Path, contents: impl AsRef<[u8]>) -> CliResult<()> {
    fs::write(path, contents).map_err(|e| CliError::Failure(format!("cannot write {}: {e}", path.display())))
}

fn csv_string<R: Serialize>(header: &[&str], rows: &[R]) -> CliResult<String> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(Vec::new());
    let err = |e: csv::Error| CliError::Failure(format!("csv: {e}"));
    if rows.is_empty() {
        w.write_record(header).map_err(err)?;
    }
    for r in rows {
        w.serialize(r).map_err(err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Failure(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Directory name for a variant, e.g. `dfc-2`.
fn variant_dir(cfg: &ModelConfig) -> String {
    match cfg.scheme {
        fracnet_core::model::Scheme::Residual => "residual".into(),
        s => format!("{s}-{}", cfg.rate),
    }
}

fn ema_series(label: String, report: &RunReport) -> Series {
    Series {
        label,
        points: report.rows.iter().map(|r| (r.step as f64, r.ema_loss)).collect(),
    }
}

struct Trained {
    report: RunReport,
    similarity: Option<SimilarityReport>,
}

fn train_one<T: Scalar>(
    model_cfg: &ModelConfig,
    corpus: &Corpus,
    train: &TrainConfig,
    out: &Path,
    probe: Option<(usize, usize, u64)>,
) -> CliResult<Trained> {
    let mut model = Model::<T>::new(model_cfg.clone())?;
    let label = model_cfg.label();
    let every = if train.eval_every > 0 { train.eval_every } else { 100 };
    let mut progress = |r: &ReportRow| {
        if r.step.is_multiple_of(every) || r.step == train.steps {
            let val = r.val_loss.map_or(String::new(), |v| format!(" val {v:.4}"));
            eprintln!("[{label}] step {} loss {:.4} ema {:.4}{val}", r.step, r.loss, r.ema_loss);
        }
    };
    let checkpoint = out.join("checkpoint.bin");
    let hooks = TrainHooks {
        checkpoint: Some(&checkpoint),
        on_step: Some(&mut progress),
    };
    let report = train_with(&mut model, corpus, train, hooks)?;
    write(&out.join("report.csv"), report.to_csv()?)?;
    write(
        &out.join("loss.svg"),
        line_chart(&label, "step", "ema_loss", &[ema_series(label.clone(), &report)]),
    )?;
    let similarity = match probe {
        Some((samples, seq, seed)) => {
            let r = similarity_probe(&model, corpus, samples, seq, seed)?;
            r.write_csv(out.join("similarity.csv"))?;
            Some(r)
        }
        None => None,
    };
    Ok(Trained { report, similarity })
}

fn train_at_precision(
    exp: &Experiment,
    model: &ModelConfig,
    out: &Path,
    probe: Option<(usize, usize, u64)>,
) -> CliResult<Trained> {
    let corpus = exp.corpus()?;
    match exp.config.precision {
        Precision::F32 => train_one::<f32>(model, corpus, &exp.config.train, out, probe),
        Precision::F64 => train_one::<f64>(model, corpus, &exp.config.train, out, probe),
    }
}

pub fn train(exp: &Experiment, out: &Path) -> CliResult<()> {
    let model = exp.model()?;
    write(&out.join("config.toml"), exp.to_toml()?)?;
    let t = train_at_precision(exp, model, out, None)?;
    println!(
        "{}: initial loss {:.4}, final EMA {:.4}",
        model.label(),
        t.report.initial_loss().unwrap_or(f64::NAN),
        t.report.final_ema().unwrap_or(f64::NAN)
    );
    Ok(())
}

#[derive(Serialize)]
struct TraceRow<'a> {
    variant: &'a str,
    step: usize,
    loss: f64,
    ema_loss: f64,
    val_loss: Option<f64>,
}

#[derive(Serialize)]
struct SummaryRow {
    variant: String,
    scheme: String,
    rate: usize,
    params: u64,
    initial_loss: Option<f64>,
    final_ema: Option<f64>,
    last_val_loss: Option<f64>,
    /// Mean over layers of the median adjacent-layer cosine.
    similarity_median: Option<f64>,
    status: String,
}

pub fn compare(exp: &Experiment, out: &Path) -> CliResult<()> {
    let base = exp.model()?;
    let specs = &exp.config.compare.schemes;
    if specs.is_empty() {
        return Err(CliError::Usage("compare.schemes is empty".into()));
    }
    let variants = specs
        .iter()
        .map(|s| parse_variant(s).map(|(scheme, rate)| base.with_scheme(scheme, rate)))
        .collect::<CliResult<Vec<_>>>()?;
    for v in &variants {
        v.validate()?;
    }
    exp.corpus()?;
    write(&out.join("config.toml"), exp.to_toml()?)?;
    let probe = &exp.config.probe;
    let probe = (probe.samples, probe.seq.unwrap_or(exp.config.train.seq_len), probe.seed);
    let mut summary = Vec::new();
    let mut reports: Vec<(String, RunReport)> = Vec::new();
    let mut first_error = None;
    for (i, v) in variants.iter().enumerate() {
        // Listing a variant twice is allowed; keep their outputs apart.
        let mut dir = variant_dir(v);
        if variants[..i].contains(v) {
            dir = format!("{dir}.{i}");
        }
        let sub = out.join(&dir);
        fs::create_dir_all(&sub).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", sub.display())))?;
        let result = train_at_precision(exp, v, &sub, Some(probe));
        let params = fracnet_core::analysis::structural_total(v);
        let mut row = SummaryRow {
            variant: dir.clone(),
            scheme: v.scheme.to_string(),
            rate: v.rate,
            params,
            initial_loss: None,
            final_ema: None,
            last_val_loss: None,
            similarity_median: None,
            status: "ok".into(),
        };
        match result {
            Ok(t) => {
                row.initial_loss = t.report.initial_loss();
                row.final_ema = t.report.final_ema();
                row.last_val_loss = t.report.last_val_loss();
                row.similarity_median = t.similarity.as_ref().and_then(|s| {
                    (!s.layers.is_empty())
                        .then(|| s.layers.iter().map(|l| l.median).sum::<f64>() / s.layers.len() as f64)
                });
                reports.push((dir, t.report));
            }
            Err(e) => {
                eprintln!("[{dir}] failed: {e}");
                row.status = format!("failed: {e}");
                first_error.get_or_insert(e);
            }
        }
        summary.push(row);
    }
    let traces: Vec<TraceRow> = reports
        .iter()
        .flat_map(|(label, r)| {
            r.rows.iter().map(move |row| TraceRow {
                variant: label,
                step: row.step,
                loss: row.loss,
                ema_loss: row.ema_loss,
                val_loss: row.val_loss,
            })
        })
        .collect();
    write(
        &out.join("comparison.csv"),
        csv_string(&["variant", "step", "loss", "ema_loss", "val_loss"], &traces)?,
    )?;
    write(
        &out.join("summary.csv"),
        csv_string(
            &[
                "variant",
                "scheme",
                "rate",
                "params",
                "initial_loss",
                "final_ema",
                "last_val_loss",
                "similarity_median",
                "status",
            ],
            &summary,
        )?,
    )?;
    let series: Vec<Series> = reports.iter().map(|(l, r)| ema_series(l.clone(), r)).collect();
    write(&out.join("ema_loss.svg"), line_chart("EMA training loss", "step", "ema_loss", &series))?;
    for row in &summary {
        println!(
            "{:<12} final EMA {}",
            row.variant,
            row.final_ema.map_or("n/a".into(), |v| format!("{v:.4}"))
        );
    }
    match first_error {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

pub fn probe(exp: &Experiment, out: &Path) -> CliResult<()> {
    let corpus = exp.corpus()?;
    let p = &exp.config.probe;
    let model = match &p.checkpoint {
        Some(path) => {
            let model = load_checkpoint::<f64>(path)?;
            if let Some(cfg) = &exp.config.model {
                if cfg != model.config() {
                    return Err(CliError::Usage(format!(
                        "checkpoint {} was built for {:?} but the config describes {:?}",
                        path.display(),
                        model.config(),
                        cfg
                    )));
                }
            }
            model
        }
        None => Model::<f64>::new(exp.model()?.clone())?,
    };
    let seq = p.seq.unwrap_or(exp.config.train.seq_len);
    let report = similarity_probe(&model, corpus, p.samples, seq, p.seed)?;
    report.write_csv(out.join("similarity.csv"))?;
    let band = Band {
        label: model.config().label(),
        rows: report.layers.iter().map(|l| (l.layer as f64, l.median, l.p5, l.p95)).collect(),
    };
    write(
        &out.join("similarity.svg"),
        band_chart("Adjacent-layer cosine similarity", "layer", "cosine", &[band]),
    )?;
    for l in &report.layers {
        println!("layer {} median {:.4} p5 {:.4} p95 {:.4}", l.layer, l.median, l.p5, l.p95);
    }
    Ok(())
}

#[derive(Serialize)]
struct FlopRow {
    scheme: String,
    m: usize,
    d: usize,
    #[serde(rename = "L")]
    n_layers: usize,
    convention: Convention,
    fc_cost: u64,
    attention_cost: u64,
    attention_ratio: f64,
    ffn_cost: u64,
    ffn_ratio: f64,
}

pub fn count(exp: &Experiment, out: &Path) -> CliResult<()> {
    let cfg = exp.model()?;
    let b = ParamBreakdown::of(cfg)?;
    write(
        &out.join("params.csv"),
        csv_string(&[], std::slice::from_ref(&b))?,
    )?;
    println!("per_fc {}", b.per_fc);
    println!("p_extra {}", b.p_extra);
    println!("base_total {}", b.base_total);
    println!("delta_pct {:.4}", b.delta_pct);
    let mut rows = Vec::new();
    if cfg.scheme.is_frac() {
        let conv = exp.config.count.convention;
        let (d, m, l) = (cfg.d_model, cfg.rate, cfg.n_layers);
        let fc = count_fc_flops(d, m, l, conv)?;
        let attn = attention_projection_cost(d) * l as u64;
        let ffn = ffn_cost(d, cfg.d_ffn) * l as u64;
        println!("fc_cost {fc}");
        rows.push(FlopRow {
            scheme: cfg.scheme.to_string(),
            m,
            d,
            n_layers: l,
            convention: conv,
            fc_cost: fc,
            attention_cost: attn,
            attention_ratio: fc as f64 / attn as f64,
            ffn_cost: ffn,
            ffn_ratio: fc as f64 / ffn as f64,
        });
    }
    write(
        &out.join("flops.csv"),
        csv_string(
            &[
                "scheme",
                "m",
                "d",
                "L",
                "convention",
                "fc_cost",
                "attention_cost",
                "attention_ratio",
                "ffn_cost",
                "ffn_ratio",
            ],
            &rows,
        )?,
    )
}

pub fn gradcheck_cmd(exp: &Experiment, out: &Path) -> CliResult<()> {
    let cfg = exp.gradcheck()?;
    let report = gradcheck(&cfg)?;
    write(&out.join("gradcheck.csv"), report.to_csv()?)?;
    let worst = report.worst();
    let name = worst.map_or("-", |w| w.param.as_str());
    println!(
        "{}: max relative error {:.3e} at {name} (tolerance {:.0e})",
        report.label,
        report.max_rel_error(),
        report.tolerance
    );
    if report.passed() {
        Ok(())
    } else {
        Err(CliError::Numeric(format!(
            "gradient check failed: {:.3e} at {name} exceeds {:.0e}",
            report.max_rel_error(),
            report.tolerance
        )))
    }
}

/// `--out`, else the config's `out`.
pub fn output_dir(flag: Option<PathBuf>, exp: &Experiment) -> CliResult<PathBuf> {
    let dir = flag
        .or_else(|| exp.config.out.clone())
        .ok_or_else(|| CliError::Usage("no output directory; pass --out or set `out`".into()))?;
    fs::create_dir_all(&dir).map_err(|e| CliError::Failure(format!("cannot create {}: {e}", dir.display())))?;
    Ok(dir)
}
