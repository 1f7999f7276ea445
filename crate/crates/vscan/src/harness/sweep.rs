//! Training-composition ratio sweep: how classification performance moves
//! as the training PET stream shifts from fully real to fully synthetic,
//! evaluated against both test domains, with a CT-only horizontal
//! baseline. Emits CSV rows plus a self-contained SVG line chart.

use super::{
    derive_seed, evaluate, make_folds, mean_sd, run_comparison, train_classifier,
    ComparisonEntry, DataPolicy, HarnessError, MetricRow, TrainSettings, Variant,
};
use crate::volume::CaseRecord;

/// One sweep cell; `ratio` is `None` for the CT-only baseline row.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub series: String,
    pub ratio: Option<u8>,
    pub gmean: f64,
}

pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub per_fold: Vec<MetricRow>,
    pub svg: String,
    pub wall_clock_secs: f64,
}

/// For each synthetic-training ratio, train the two-stream fusion model
/// on a `Mixed(ratio)` stream and evaluate its GMean on both the real-PET
/// and synthetic-PET test domains; also run the CT-only baseline once.
/// Fold splits and per-(variant, fold) seeds are identical to
/// [`run_comparison`]'s, so the ratio endpoints match the corresponding
/// comparison cells bit for bit.
pub fn run_ratio_sweep(
    cohort: &[CaseRecord],
    ratios: &[u8],
    k: usize,
    seed: u64,
    settings: &TrainSettings,
) -> Result<SweepResult, HarnessError> {
    let started = std::time::Instant::now();
    let folds = make_folds(cohort, k, seed)?;
    let mut rows = Vec::new();
    let mut per_fold: Vec<MetricRow> = Vec::new();

    for &ratio in ratios {
        for fold in &folds {
            let train_seed = derive_seed(seed, &[Variant::Mint.seed_tag(), fold.fold_index as u64]);
            let trained = train_classifier(
                cohort,
                Variant::Mint,
                fold,
                DataPolicy::Mixed(ratio),
                settings,
                train_seed,
            )?;
            for (series, policy) in [
                ("real_test", DataPolicy::RealPet),
                ("synth_test", DataPolicy::SynthPet),
            ] {
                let outcome = evaluate(
                    &trained,
                    cohort,
                    fold,
                    policy,
                    settings,
                    &format!("{series}@{ratio}"),
                    train_seed,
                )?;
                per_fold.push(outcome.row);
            }
        }
        for series in ["real_test", "synth_test"] {
            let (mean, _) = mean_sd(&per_fold, &format!("{series}@{ratio}"), "gmean")
                .unwrap_or((0.0, 0.0));
            rows.push(SweepRow {
                series: series.to_string(),
                ratio: Some(ratio),
                gmean: mean,
            });
        }
    }

    // CT-only dashed baseline (one value)
    let baseline = run_comparison(
        cohort,
        &[ComparisonEntry {
            name: "ct_only".into(),
            variant: Variant::CtOnly,
            train_policy: DataPolicy::NoPet,
            test_policy: DataPolicy::NoPet,
        }],
        k,
        seed,
        settings,
        String::new(),
    )?;
    per_fold.extend(baseline.rows.iter().cloned());
    let (base_mean, _) = mean_sd(&baseline.rows, "ct_only", "gmean").unwrap_or((0.0, 0.0));
    rows.push(SweepRow {
        series: "ct_only_baseline".into(),
        ratio: None,
        gmean: base_mean,
    });

    let svg = sweep_svg(&rows, ratios);
    Ok(SweepResult {
        rows,
        per_fold,
        svg,
        wall_clock_secs: started.elapsed().as_secs_f64(),
    })
}

/// Render the sweep as a self-contained SVG: one line per test domain
/// plus the CT-only baseline as a horizontal dashed line.
pub fn sweep_svg(rows: &[SweepRow], ratios: &[u8]) -> String {
    let (w, h) = (800.0, 500.0);
    let (ml, mr, mt, mb) = (70.0, 30.0, 40.0, 60.0);
    let plot_w = w - ml - mr;
    let plot_h = h - mt - mb;
    let x_of = |ratio: f64| ml + plot_w * ratio / 100.0;
    let y_of = |g: f64| mt + plot_h * (1.0 - g.clamp(0.0, 1.0));

    let mut svg = String::new();
    svg.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n"
    ));
    svg.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    // axes
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h,
        ml + plot_w,
        mt + plot_h
    ));
    svg.push_str(&format!(
        "<line x1=\"{ml}\" y1=\"{mt}\" x2=\"{ml}\" y2=\"{}\" stroke=\"black\"/>\n",
        mt + plot_h
    ));
    for tick in 0..=5 {
        let g = tick as f64 / 5.0;
        let y = y_of(g);
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{ml}\" y2=\"{y}\" stroke=\"black\"/>\n",
            ml - 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\" text-anchor=\"end\">{g:.1}</text>\n",
            ml - 9.0,
            y + 4.0
        ));
    }
    for &r in ratios {
        let x = x_of(r as f64);
        svg.push_str(&format!(
            "<line x1=\"{x}\" y1=\"{}\" x2=\"{x}\" y2=\"{}\" stroke=\"black\"/>\n",
            mt + plot_h,
            mt + plot_h + 5.0
        ));
        svg.push_str(&format!(
            "<text x=\"{x}\" y=\"{}\" font-size=\"12\" text-anchor=\"middle\">{r}</text>\n",
            mt + plot_h + 20.0
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\">synthetic share of training PET (%)</text>\n",
        ml + plot_w / 2.0,
        h - 15.0
    ));
    svg.push_str(&format!(
        "<text x=\"18\" y=\"{}\" font-size=\"14\" text-anchor=\"middle\" transform=\"rotate(-90 18 {})\">GMean</text>\n",
        mt + plot_h / 2.0,
        mt + plot_h / 2.0
    ));

    let series_points = |name: &str| -> Vec<(f64, f64)> {
        let mut pts: Vec<(u8, f64)> = rows
            .iter()
            .filter(|r| r.series == name)
            .filter_map(|r| r.ratio.map(|x| (x, r.gmean)))
            .collect();
        pts.sort_by_key(|(r, _)| *r);
        pts.into_iter()
            .map(|(r, g)| (x_of(r as f64), y_of(g)))
            .collect()
    };
    for (name, color) in [("real_test", "#c0392b"), ("synth_test", "#2e6da4")] {
        let pts = series_points(name);
        if pts.is_empty() {
            continue;
        }
        let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
        svg.push_str(&format!(
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" stroke-width=\"2\"/>\n",
            path.join(" ")
        ));
        for (x, y) in &pts {
            svg.push_str(&format!(
                "<circle cx=\"{x:.1}\" cy=\"{y:.1}\" r=\"3\" fill=\"{color}\"/>\n"
            ));
        }
    }
    if let Some(base) = rows.iter().find(|r| r.series == "ct_only_baseline") {
        let y = y_of(base.gmean);
        svg.push_str(&format!(
            "<line x1=\"{ml}\" y1=\"{y:.1}\" x2=\"{}\" y2=\"{y:.1}\" stroke=\"#444444\" stroke-width=\"2\" stroke-dasharray=\"8 5\"/>\n",
            ml + plot_w
        ));
    }
    // legend
    let legend = [
        ("real PET test", "#c0392b", "none"),
        ("synthetic PET test", "#2e6da4", "none"),
        ("CT-only baseline", "#444444", "8 5"),
    ];
    for (i, (label, color, dash)) in legend.iter().enumerate() {
        let y = mt + 14.0 + 20.0 * i as f64;
        svg.push_str(&format!(
            "<line x1=\"{}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"{color}\" stroke-width=\"2\" stroke-dasharray=\"{dash}\"/>\n",
            ml + 12.0,
            ml + 48.0
        ));
        svg.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-size=\"12\">{label}</text>\n",
            ml + 54.0,
            y + 4.0
        ));
    }
    svg.push_str("</svg>\n");
    svg
}
