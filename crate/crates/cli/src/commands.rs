use anyhow::{Context, Result};
use serde::Serialize;

use tats_core::embedding_io::hash_embed_all;
use tats_core::experiment::{hidden_driver, DRIVER_EMBED_DIM, DRIVER_LEAD, DRIVER_PERIOD};
use tats_core::transport::shuffle_ratio;
use tats_core::{
    evaluate as score, generate_mask, impute_series, load_csv, run_experiment, BackboneConfig, ChannelMixing,
    CtrConfig, EvalReport, ExperimentConfig, Mode, Task, TatsConfig, TransportConfig,
};

use crate::input::{column_names, invalid, read_mask, read_table, write_embeddings_any, write_json, write_table};
use crate::{
    AnalyzeCtrArgs, EmbedHashArgs, EvaluateArgs, ImputeArgs, MixingArg, ModeArg, ModelArg, ModelArgs, SynthArgs,
    TaskArg, TrainArgs, TtWassersteinArgs,
};

pub fn analyze_ctr(a: AnalyzeCtrArgs) -> Result<()> {
    let ds = a.data.load()?;
    let cfg = CtrConfig {
        nms_radius: a.nms_radius,
        top_l: a.top,
        max_lag: a.max_lag,
        min_peak_ratio: a.min_peak_ratio,
    };
    let report = tats_core::analyze_ctr(&ds, &cfg)?;
    write_json(a.out.as_deref(), &report)?;
    println!(
        "T={} vars={} max_lag={} matched {}/{} text frequencies (tolerance {:.5})",
        ds.len(),
        ds.series().n_vars(),
        report.max_lag,
        report.matched_count,
        report.top_text_frequencies.len(),
        report.match_tolerance
    );
    for f in &report.top_text_frequencies {
        let mark = if f.matched { "matched" } else { "-" };
        println!(
            "  f={:.5} (period {:.2})  amplitude {:.4}  {mark}",
            f.frequency,
            1.0 / f.frequency,
            f.amplitude
        );
    }
    Ok(())
}

pub fn tt_wasserstein(a: TtWassersteinArgs) -> Result<()> {
    if a.shuffles == 0 {
        return Err(invalid("--shuffles must be at least 1"));
    }
    let ds = a.data.load()?;
    let seeds: Vec<u64> = (0..a.shuffles).map(|i| a.seed + i).collect();
    let report = shuffle_ratio(&ds, &seeds, &TransportConfig { max_lag: a.max_lag })?;
    write_json(a.out.as_deref(), &report)?;
    println!(
        "original {:.5}  shuffled series {:.5}  shuffled text {:.5}  ratio {:.1}%",
        report.original, report.ts_shuffled_mean, report.text_shuffled_mean, report.ratio_percent
    );
    Ok(())
}

fn backbone(m: &ModelArgs) -> BackboneConfig {
    let mixing = match m.mixing {
        MixingArg::Shared => ChannelMixing::Shared,
        MixingArg::Mixing => ChannelMixing::Mixing,
    };
    match m.model {
        ModelArg::Linear => BackboneConfig::Linear { mixing },
        ModelArg::Dlinear => BackboneConfig::Dlinear {
            kernel: m.kernel,
            mixing,
        },
        ModelArg::Mlp => BackboneConfig::Mlp {
            hidden: m.hidden,
            dropout: m.dropout,
        },
    }
}

fn base_config(m: &ModelArgs, task: Task) -> ExperimentConfig {
    ExperimentConfig {
        task,
        backbone: backbone(m),
        seq_len: m.seq_len,
        tats: TatsConfig {
            d_mapped: m.d_mapped,
            dropout: m.dropout,
            use_norm: !m.no_norm,
        },
        lr: m.lr,
        lr2: m.lr2,
        batch: m.batch,
        epochs: m.epochs,
        patience: m.patience,
        ..ExperimentConfig::default()
    }
}

pub fn train(a: TrainArgs) -> Result<()> {
    let ds = a.data.load()?;
    let task = match a.task {
        TaskArg::Forecast => Task::Forecast,
        TaskArg::Impute => Task::Impute,
    };
    let modes = a
        .modes
        .iter()
        .map(|m| match m {
            ModeArg::Tats => Mode::Tats,
            ModeArg::NumericalOnly => Mode::NumericalOnly,
            ModeArg::TextShuffle => Mode::TextShuffle,
            ModeArg::TextOnly1d => Mode::TextOnly1d,
        })
        .collect();
    let cfg = ExperimentConfig {
        pred_lens: a.pred_len.clone(),
        seeds: a.seeds.clone(),
        modes,
        missing_ratio: a.missing_ratio,
        jobs: a.jobs.unwrap_or(0),
        ..base_config(&a.model, task)
    };
    let doc = run_experiment(&ds, &cfg)?;
    write_json(a.out.as_deref(), &doc)?;
    println!("{} cells, backbone {}", doc.cells.len(), cfg.backbone.name());
    for agg in &doc.aggregates {
        let h = agg.pred_len.map_or("all".to_string(), |h| h.to_string());
        println!(
            "  {:<15} H={h:<4} mse {:.5}  mae {:.5}  ({} cells)",
            agg.mode.name(),
            agg.mse,
            agg.mae,
            agg.cells
        );
    }
    for p in &doc.promotions {
        let h = p.pred_len.map_or("all".to_string(), |h| h.to_string());
        println!(
            "  promotion {:<15} H={h:<4} mse {:+.1}%  mae {:+.1}%",
            p.mode.name(),
            p.mse_percent,
            p.mae_percent
        );
    }
    if let Some(c) = doc
        .cells
        .iter()
        .max_by(|x, y| x.params.overhead_percent.total_cmp(&y.params.overhead_percent))
    {
        println!(
            "  projector overhead up to {:.2}% of parameters",
            c.params.overhead_percent
        );
    }
    for c in doc.cells.iter().filter(|c| c.mean_fill.is_some()) {
        let fill = c.mean_fill.as_ref().expect("filtered");
        println!(
            "  {}: masked mse {:.5} vs mean fill {:.5}",
            c.key, c.metrics.mse, fill.mse
        );
    }
    Ok(())
}

pub fn evaluate(a: EvaluateArgs) -> Result<()> {
    let pred = read_table(&a.pred)?;
    let target = read_table(&a.target)?;
    let mask = a.mask.as_deref().map(read_mask).transpose()?;
    let report = score(pred.view(), target.view(), mask.as_ref().map(|m| m.entries()))?;
    write_json(a.out.as_deref(), &report)?;
    print_report(&report);
    Ok(())
}

fn print_report(r: &EvalReport) {
    let pct = |v: Option<f64>| v.map_or("n/a".to_string(), |v| format!("{v:.4}"));
    println!(
        "n={} mse {:.6} mae {:.6} rmse {:.6} mape {} mspe {}",
        r.n,
        r.mse,
        r.mae,
        r.rmse,
        pct(r.mape),
        pct(r.mspe)
    );
}

#[derive(Serialize)]
struct ImputeDocument {
    #[serde(flatten)]
    imputation: tats_core::experiment::SeriesImputation,
    /// Present when the mask was drawn here, so the hidden values are known.
    metrics: Option<EvalReport>,
}

pub fn impute(a: ImputeArgs) -> Result<()> {
    let ds = a.data.load()?;
    let (mask, generated) = match &a.mask {
        Some(p) => (read_mask(p)?, false),
        None => (
            generate_mask(ds.series().values().dim(), a.missing_ratio, a.seed)?,
            true,
        ),
    };
    let cfg = base_config(&a.model, Task::Impute);
    let out = impute_series(&ds, &mask, &cfg, a.seed)?;
    let metrics = if generated {
        let hidden = mask.entries().mapv(|m| !m);
        Some(score(out.values.view(), ds.series().values(), Some(hidden.view()))?)
    } else {
        None
    };
    if let Some(p) = &a.out_csv {
        write_table(p, &column_names(ds.series().n_vars()), out.values.view())?;
    }
    println!(
        "filled {} cells; {} windows fell back to the observed mean; projector overhead {:.2}%",
        out.missing_cells, out.fallback_windows, out.params.overhead_percent
    );
    if let Some(m) = &metrics {
        print!("hidden cells: ");
        print_report(m);
    }
    write_json(
        a.out.as_deref(),
        &ImputeDocument {
            imputation: out,
            metrics,
        },
    )
}

#[derive(Serialize)]
struct EmbedSummary {
    t: usize,
    d: usize,
    seed: u64,
    empty_texts: usize,
}

pub fn embed_hash(a: EmbedHashArgs) -> Result<()> {
    if a.dim == 0 {
        return Err(invalid("--dim must be positive"));
    }
    let csv = load_csv(&a.data, Some(&a.text_col)).with_context(|| format!("reading {}", a.data.display()))?;
    let texts = csv.texts.expect("text column requested");
    let emb = hash_embed_all(&texts, a.dim, a.seed)?;
    write_embeddings_any(&emb, &a.emb_out)?;
    let summary = EmbedSummary {
        t: emb.len(),
        d: emb.dim(),
        seed: a.seed,
        empty_texts: texts.iter().filter(|t| t.split_whitespace().next().is_none()).count(),
    };
    println!(
        "embedded {} texts into {} dimensions ({} empty) -> {}",
        summary.t,
        summary.d,
        summary.empty_texts,
        a.emb_out.display()
    );
    write_json(a.out.as_deref(), &summary)
}

#[derive(Serialize)]
struct SynthSummary {
    t: usize,
    seed: u64,
    embedding_dim: usize,
    driver_period: f64,
    driver_lead: usize,
}

pub fn synth(a: SynthArgs) -> Result<()> {
    let hd = hidden_driver(a.t, a.seed)?;
    let ds = &hd.dataset;
    write_table(&a.csv_out, &column_names(ds.series().n_vars()), ds.series().values())?;
    write_embeddings_any(ds.embeddings(), &a.emb_out)?;
    let summary = SynthSummary {
        t: a.t,
        seed: a.seed,
        embedding_dim: DRIVER_EMBED_DIM,
        driver_period: DRIVER_PERIOD,
        driver_lead: DRIVER_LEAD,
    };
    println!(
        "wrote T={} series to {} and {}-dim embeddings to {}",
        a.t,
        a.csv_out.display(),
        DRIVER_EMBED_DIM,
        a.emb_out.display()
    );
    write_json(a.out.as_deref(), &summary)
}
