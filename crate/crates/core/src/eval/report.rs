//! Self-contained static HTML highlight report.
//!
//! Selected tokens get a colored background, ground-truth tokens an
//! underline, so agreement shows as both at once. Output is plain
//! string assembly with stable ordering: byte-identical for identical
//! inputs.

use std::path::Path;

use super::{EvalError, EvalReport};

pub fn render_report(report: &EvalReport, path: &Path) -> Result<(), EvalError> {
    let html = render_html(report);
    std::fs::write(path, html).map_err(|source| EvalError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn render_html(report: &EvalReport) -> String {
    let mut out = String::with_capacity(16 * 1024);
    out.push_str("<!DOCTYPE html>\n<html lang=\"en\">\n<head>\n<meta charset=\"utf-8\">\n");
    out.push_str("<title>Rationale report</title>\n<style>\n");
    out.push_str(
        "body { font-family: sans-serif; margin: 2em; }\n\
         table { border-collapse: collapse; margin-bottom: 1.5em; }\n\
         td, th { border: 1px solid #999; padding: 0.3em 0.7em; text-align: left; }\n\
         .tok { padding: 0.1em 0.25em; margin: 0 0.06em; display: inline-block; }\n\
         .sel { background: #b7e4b0; }\n\
         .truth { text-decoration: underline; text-underline-offset: 3px; }\n\
         .ex { margin: 0.8em 0; padding: 0.5em; border: 1px solid #ddd; }\n\
         .hdr { color: #555; font-size: 0.85em; margin-bottom: 0.25em; }\n",
    );
    out.push_str("</style>\n</head>\n<body>\n");
    out.push_str(&format!(
        "<h1>Rationale report &mdash; {} split</h1>\n",
        escape(&report.split)
    ));

    out.push_str("<table>\n<tr><th>metric</th><th>value</th></tr>\n");
    let mut metric = |name: &str, value: String| {
        out.push_str(&format!(
            "<tr><td>{}</td><td>{}</td></tr>\n",
            escape(name),
            value
        ));
    };
    metric("examples", format!("{}", report.examples));
    metric("accuracy", format!("{:.4}", report.accuracy));
    metric("dev accuracy", format!("{:.4}", report.dev_accuracy));
    metric("precision (micro)", format!("{:.4}", report.selection.precision));
    metric("recall (micro)", format!("{:.4}", report.selection.recall));
    metric("F1 (micro)", format!("{:.4}", report.selection.f1));
    metric(
        "precision (macro)",
        format!("{:.4}", report.selection.macro_precision),
    );
    metric("recall (macro)", format!("{:.4}", report.selection.macro_recall));
    metric("F1 (macro)", format!("{:.4}", report.selection.macro_f1));
    metric(
        "empty selections",
        format!("{}", report.selection.empty_predictions),
    );
    if let Some(rate) = report.bias_highlighted {
        metric("bias highlighted", format!("{rate:.4}"));
    }
    if let Some(gap) = report.invariance_gap {
        metric("invariance gap (L_i - L_e)", format!("{gap:.4} nats"));
    }
    out.push_str("</table>\n");

    out.push_str(
        "<p><span class=\"tok sel\">selected</span> tokens are highlighted; \
         <span class=\"tok truth\">ground-truth</span> tokens are underlined.</p>\n",
    );

    for (i, h) in report.highlights.iter().enumerate() {
        out.push_str(&format!(
            "<div class=\"ex\"><div class=\"hdr\">#{} &mdash; label {}, predicted {}</div>",
            i, h.label, h.predicted_label
        ));
        for ((tok, sel), truth) in h.tokens.iter().zip(&h.selected).zip(&h.truth) {
            let mut classes = String::from("tok");
            if *sel {
                classes.push_str(" sel");
            }
            if *truth {
                classes.push_str(" truth");
            }
            out.push_str(&format!(
                "<span class=\"{classes}\">{}</span>",
                escape(tok)
            ));
        }
        out.push_str("</div>\n");
    }
    out.push_str("</body>\n</html>\n");
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
        .replace('"', "&quot;")
}
