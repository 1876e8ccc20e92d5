use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use plotters::prelude::*;

use super::{DIVERGE_SCHEMA, INVERT_SCHEMA, SWEEP_SCHEMA};
use crate::error::{Error, Result};

struct Series {
    name: String,
    points: Vec<(f64, f64)>,
}

struct Figure {
    title: String,
    x_desc: String,
    y_desc: String,
    series: Vec<Series>,
}

fn plot_err<E: std::fmt::Display>(e: E) -> Error {
    Error::Plot(e.to_string())
}

fn read_table(path: &Path) -> Result<(String, Vec<String>, Vec<Vec<String>>)> {
    let text = fs::read_to_string(path)?;
    let (first, rest) = text.split_once('\n').unwrap_or((&text, ""));
    let schema = first
        .strip_prefix("#schema=")
        .ok_or_else(|| Error::Plot(format!("{} has no schema line", path.display())))?
        .trim()
        .to_string();
    let mut reader = csv::Reader::from_reader(rest.as_bytes());
    let header = reader.headers()?.iter().map(String::from).collect();
    let rows = reader.records().map(|r| r.map(|r| r.iter().map(String::from).collect())).collect::<Result<_, _>>()?;
    Ok((schema, header, rows))
}

fn column(header: &[String], name: &str) -> Result<usize> {
    header.iter().position(|h| h == name).ok_or_else(|| Error::Plot(format!("missing column {name}")))
}

fn num(s: &str) -> Result<f64> {
    s.parse().map_err(|_| Error::Plot(format!("not a number: {s:?}")))
}

fn log10_floor(v: f64) -> f64 {
    v.max(1e-300).log10()
}

fn figure_from(schema: &str, header: &[String], rows: &[Vec<String>]) -> Result<Figure> {
    if schema == SWEEP_SCHEMA {
        let n = column(header, "n")?;
        let upper = column(header, "upper")?;
        let lower = column(header, "lower_1")?;
        let pick = |c: usize| rows.iter().map(|r| Ok((num(&r[n])?, num(&r[c])?))).collect::<Result<Vec<_>>>();
        Ok(Figure {
            title: "Jacobian norm bounds".into(),
            x_desc: "N".into(),
            y_desc: "norm".into(),
            series: vec![
                Series { name: "upper bound".into(), points: pick(upper)? },
                Series { name: "best lower bound".into(), points: pick(lower)? },
            ],
        })
    } else if schema == INVERT_SCHEMA {
        let (k, c, it, e) =
            (column(header, "kind")?, column(header, "c")?, column(header, "iters")?, column(header, "max_error")?);
        let mut groups: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
        for r in rows {
            groups.entry(format!("{} c={}", r[k], r[c])).or_default().push((num(&r[it])?, log10_floor(num(&r[e])?)));
        }
        Ok(Figure {
            title: "Fixed-point reconstruction error".into(),
            x_desc: "iterations".into(),
            y_desc: "log10 max error".into(),
            series: groups.into_iter().map(|(name, points)| Series { name, points }).collect(),
        })
    } else if schema == DIVERGE_SCHEMA {
        let s = column(header, "step")?;
        let series = ["dp_jac_inf", "dp_best", "l2_jac_inf"]
            .iter()
            .map(|name| {
                let c = column(header, name)?;
                let points = rows.iter().map(|r| Ok((num(&r[s])?, log10_floor(num(&r[c])?)))).collect::<Result<_>>()?;
                Ok(Series { name: name.to_string(), points })
            })
            .collect::<Result<_>>()?;
        Ok(Figure { title: "Jacobian norm during ascent".into(), x_desc: "step".into(), y_desc: "log10 norm".into(), series })
    } else {
        Err(Error::Plot(format!("unknown schema {schema:?}")))
    }
}

fn range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
    if !lo.is_finite() {
        return (0.0, 1.0);
    }
    let pad = if hi > lo { 0.05 * (hi - lo) } else { 0.5 };
    (lo - pad, hi + pad)
}

/// Renders a CSV written by one of the experiment runners as an SVG line chart.
pub fn plot_csv(input: &Path, output: &Path) -> Result<()> {
    let (schema, header, rows) = read_table(input)?;
    let fig = figure_from(&schema, &header, &rows)?;
    let (x0, x1) = range(fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.0)));
    let (y0, y1) = range(fig.series.iter().flat_map(|s| s.points.iter().map(|p| p.1)));

    let root = SVGBackend::new(output, (800, 500)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let mut chart = ChartBuilder::on(&root)
        .caption(&fig.title, ("sans-serif", 20))
        .margin(15)
        .x_label_area_size(40)
        .y_label_area_size(60)
        .build_cartesian_2d(x0..x1, y0..y1)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc(&fig.x_desc).y_desc(&fig.y_desc).draw().map_err(plot_err)?;
    for (idx, s) in fig.series.iter().enumerate() {
        let color = Palette99::pick(idx).to_rgba();
        chart
            .draw_series(LineSeries::new(s.points.iter().copied(), color.stroke_width(2)))
            .map_err(plot_err)?
            .label(s.name.clone())
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 20, y)], color));
    }
    chart.configure_series_labels().background_style(WHITE).border_style(BLACK).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_each_schema() {
        let dir = tempfile::tempdir().unwrap();
        let cases = [
            (SWEEP_SCHEMA, "n,p,upper,lower_1,restarts,seed\n3,inf,2.85,1.2,5,0\n4,inf,3.4,1.5,5,0\n"),
            (INVERT_SCHEMA, "kind,c,iters,max_error\nDP,0.9,1,3.0\nDP,0.9,2,2.5\nL2-contractive,0.9,1,1e-3\n"),
            (DIVERGE_SCHEMA, "step,dp_jac_inf,dp_best,l2_jac_inf\n0,1,1,1\n1,2,2,1.1\n"),
        ];
        for (k, (schema, body)) in cases.iter().enumerate() {
            let input = dir.path().join(format!("{k}.csv"));
            let output = dir.path().join(format!("{k}.svg"));
            fs::write(&input, format!("#schema={schema}\n{body}")).unwrap();
            plot_csv(&input, &output).unwrap();
            assert!(fs::read_to_string(&output).unwrap().starts_with("<svg"));
        }
        let bad = dir.path().join("bad.csv");
        fs::write(&bad, "a,b\n1,2\n").unwrap();
        assert!(plot_csv(&bad, &dir.path().join("bad.svg")).is_err());
    }
}
