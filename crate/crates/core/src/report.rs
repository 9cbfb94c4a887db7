//! CSV tables and SVG figures rendered from evaluation and statistics results.

use std::path::Path;

use plotters::prelude::*;

use crate::engine::EpochRecord;
use crate::stats::{bland_altman, BlandAltmanResult, GroupReport};
use crate::{Error, Result};

fn plot_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Serde(format!("{}: {e}", path.display()))
}

fn padded(lo: f64, hi: f64) -> (f64, f64) {
    let span = (hi - lo).abs().max(1e-9);
    (lo - 0.08 * span, hi + 0.08 * span)
}

/// Bland-Altman agreement plot: one point per subject at (mean, difference)
/// with lines at the bias and at bias ± 1.96 SD.
pub fn plot_bland_altman(path: &Path, title: &str, truth: &[f64], predicted: &[f64]) -> Result<BlandAltmanResult> {
    let ba = bland_altman(truth, predicted)?;
    let points: Vec<(f64, f64)> = truth
        .iter()
        .zip(predicted)
        .map(|(&t, &p)| ((t + p) / 2.0, p - t))
        .collect();
    let (x0, x1) = padded(
        points.iter().map(|p| p.0).fold(f64::INFINITY, f64::min),
        points.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max),
    );
    let (y0, y1) = padded(
        points.iter().map(|p| p.1).fold(ba.lower, f64::min),
        points.iter().map(|p| p.1).fold(ba.upper, f64::max),
    );

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("mean of ground truth and prediction (mm³)")
        .y_desc("prediction − ground truth (mm³)")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(points.iter().map(|&p| Circle::new(p, 3, BLUE.filled())))
        .map_err(|e| plot_err(path, e))?;
    for (y, color, label) in [
        (ba.bias, BLACK, format!("bias {:.1}", ba.bias)),
        (ba.upper, RED, format!("+1.96 SD {:.1}", ba.upper)),
        (ba.lower, RED, format!("−1.96 SD {:.1}", ba.lower)),
    ] {
        chart
            .draw_series(LineSeries::new([(x0, y), (x1, y)], color.stroke_width(1)))
            .map_err(|e| plot_err(path, e))?
            .label(label)
            .legend(move |(x, y)| PathElement::new([(x, y), (x + 16, y)], color));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(ba)
}

/// Training (and validation, when logged) loss per epoch.
pub fn plot_loss_curves(path: &Path, title: &str, history: &[EpochRecord]) -> Result<()> {
    if history.is_empty() {
        return Err(Error::EmptyDataset("no epochs to plot".into()));
    }
    let train: Vec<(f64, f64)> = history.iter().map(|r| (r.epoch as f64, r.train_loss)).collect();
    let val: Vec<(f64, f64)> = history
        .iter()
        .filter_map(|r| r.val_loss.map(|v| (r.epoch as f64, v)))
        .collect();
    let all = train.iter().chain(&val).map(|p| p.1);
    let (y0, y1) = padded(
        all.clone().fold(f64::INFINITY, f64::min),
        all.fold(f64::NEG_INFINITY, f64::max),
    );
    let x1 = (history.last().map_or(0, |r| r.epoch) as f64).max(1.0);

    let root = SVGBackend::new(path, (640, 480)).into_drawing_area();
    root.fill(&WHITE).map_err(|e| plot_err(path, e))?;
    let mut chart = ChartBuilder::on(&root)
        .caption(title, ("sans-serif", 20))
        .margin(12)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(0.0..x1, y0..y1)
        .map_err(|e| plot_err(path, e))?;
    chart
        .configure_mesh()
        .x_desc("epoch")
        .y_desc("loss")
        .draw()
        .map_err(|e| plot_err(path, e))?;
    chart
        .draw_series(LineSeries::new(train.clone(), BLUE.stroke_width(2)))
        .map_err(|e| plot_err(path, e))?
        .label("train")
        .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], BLUE));
    if !val.is_empty() {
        chart
            .draw_series(LineSeries::new(val.clone(), RED.stroke_width(2)))
            .map_err(|e| plot_err(path, e))?
            .label("validation")
            .legend(|(x, y)| PathElement::new([(x, y), (x + 16, y)], RED));
    }
    chart
        .configure_series_labels()
        .background_style(WHITE.mix(0.8))
        .border_style(BLACK)
        .draw()
        .map_err(|e| plot_err(path, e))?;
    root.present().map_err(|e| plot_err(path, e))?;
    Ok(())
}

/// One row per structure: agreement between ground-truth and predicted volumes.
pub fn write_bland_altman_csv(path: &Path, rows: &[(String, BlandAltmanResult)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| plot_err(path, e))?;
    w.write_record([
        "structure",
        "n",
        "bias",
        "sd",
        "lower",
        "upper",
        "rpc",
        "rpc_percent",
        "cv_percent",
        "pearson",
    ])?;
    for (name, r) in rows {
        w.write_record([
            name.clone(),
            r.n.to_string(),
            r.bias.to_string(),
            r.sd.to_string(),
            r.lower.to_string(),
            r.upper.to_string(),
            r.rpc.to_string(),
            r.rpc_percent.to_string(),
            r.cv_percent.to_string(),
            r.pearson.map_or(String::new(), |v| v.to_string()),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Group-then-nucleus ANCOVA table; nucleus rows appear only under flagged groups.
pub fn write_group_report_csv(path: &Path, report: &GroupReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| plot_err(path, e))?;
    w.write_record([
        "source",
        "level",
        "group",
        "structure",
        "f",
        "df1",
        "df2",
        "p",
        "significant",
        "lsmean_control",
        "se_control",
        "lsmean_patient",
        "se_patient",
    ])?;
    let source = report.source.prefix();
    for g in &report.groups {
        let mut row = |level: &str, structure: &str, a: &crate::stats::AncovaResult| {
            w.write_record([
                source.to_string(),
                level.to_string(),
                g.group.clone(),
                structure.to_string(),
                a.f.to_string(),
                a.df.0.to_string(),
                a.df.1.to_string(),
                a.p.to_string(),
                (a.p < report.alpha).to_string(),
                a.ls_means[0].mean.to_string(),
                a.ls_means[0].se.to_string(),
                a.ls_means[1].mean.to_string(),
                a.ls_means[1].se.to_string(),
            ])
        };
        row("group", "", &g.ancova)?;
        for n in &g.nuclei {
            row("nucleus", &n.structure, &n.ancova)?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plots_are_svg_and_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let t = [100.0, 120.0, 90.0, 110.0, 130.0];
        let p = [102.0, 118.0, 95.0, 108.0, 133.0];
        let a = dir.path().join("a.svg");
        let b = dir.path().join("b.svg");
        let ba = plot_bland_altman(&a, "VLp", &t, &p).unwrap();
        plot_bland_altman(&b, "VLp", &t, &p).unwrap();
        assert!((ba.bias - 1.2).abs() < 1e-12);
        let text = std::fs::read_to_string(&a).unwrap();
        assert!(text.starts_with("<svg"));
        assert!(text.matches("<circle").count() >= 5);
        assert_eq!(text, std::fs::read_to_string(&b).unwrap());

        let history: Vec<EpochRecord> = (0..4)
            .map(|e| EpochRecord {
                epoch: e,
                lr: 0.001,
                train_loss: 1.0 / (e + 1) as f64,
                val_loss: Some(1.2 / (e + 1) as f64),
                train_components: Default::default(),
            })
            .collect();
        plot_loss_curves(&dir.path().join("loss.svg"), "segmentation", &history).unwrap();
        assert!(plot_loss_curves(&dir.path().join("x.svg"), "x", &[]).is_err());
    }
}
