//! Static timeline pictures: truth, each retrieval stage, final answer.

use std::fmt::Write as _;

use grounding::manifest::PredictionRecord;
use grounding::orchestrator::StageKind;
use grounding::timeline::Moment;

const WIDTH: f64 = 800.0;
const LEFT: f64 = 110.0;
const ROW: f64 = 28.0;
const BAR: f64 = 16.0;

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}

struct Band {
    label: String,
    class: &'static str,
    spans: Vec<(f64, f64)>,
}

pub fn render_timeline(query_text: &str, duration: f64, truth: &[Moment], pred: &PredictionRecord) -> String {
    let mut bands = vec![Band {
        label: "truth".into(),
        class: "gt",
        spans: truth.iter().map(|m| (m.start(), m.end())).collect(),
    }];
    let mut coarse = 0;
    for stage in &pred.stage_trace {
        if stage.kind == StageKind::Coarse {
            coarse += 1;
            bands.push(Band {
                label: format!("stage {coarse}"),
                class: "stage",
                spans: stage.retrieved.iter().map(|r| (r.start, r.end)).collect(),
            });
        }
    }
    bands.push(Band {
        label: "prediction".into(),
        class: "pred",
        spans: pred.moments.iter().map(|m| (m.start(), m.end())).collect(),
    });

    let span = WIDTH - LEFT - 10.0;
    let x = |t: f64| LEFT + span * (t / duration.max(1e-9)).clamp(0.0, 1.0);
    let height = 40.0 + ROW * bands.len() as f64 + 20.0;
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{height}" viewBox="0 0 {WIDTH} {height}">"#
    );
    s.push_str(
        "<style>text{font:12px sans-serif}.gt{fill:#2e7d32}.stage{fill:#90a4ae}.pred{fill:#c62828}.axis{stroke:#444}</style>\n",
    );
    let _ = writeln!(s, r#"<text x="10" y="18">{}</text>"#, escape(&pred.query_id));
    let _ = writeln!(s, r#"<text x="{LEFT}" y="18">{}</text>"#, escape(query_text));
    for (i, band) in bands.iter().enumerate() {
        let y = 40.0 + ROW * i as f64;
        let _ = writeln!(
            s,
            r#"<g class="band" data-band="{}"><text x="10" y="{:.1}">{}</text>"#,
            band.class,
            y + BAR - 3.0,
            escape(&band.label)
        );
        for &(a, b) in &band.spans {
            let w = (x(b) - x(a)).max(1.0);
            let _ = writeln!(
                s,
                r#"<rect class="{}" x="{:.2}" y="{y:.1}" width="{w:.2}" height="{BAR}"><title>{a:.2}-{b:.2} s</title></rect>"#,
                band.class,
                x(a)
            );
        }
        s.push_str("</g>\n");
    }
    let axis_y = 40.0 + ROW * bands.len() as f64;
    let _ = writeln!(
        s,
        r#"<line class="axis" x1="{LEFT}" y1="{axis_y:.1}" x2="{:.1}" y2="{axis_y:.1}"/>"#,
        LEFT + span
    );
    let _ = writeln!(s, r#"<text x="{LEFT}" y="{:.1}">0 s</text>"#, axis_y + 14.0);
    let _ = writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{duration} s</text>"#,
        LEFT + span,
        axis_y + 14.0
    );
    s.push_str("</svg>\n");
    s
}

/// File name for a query's picture: unsafe characters become `_`.
pub fn file_name(query_id: &str) -> String {
    let safe: String = query_id
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    format!("{safe}.svg")
}
