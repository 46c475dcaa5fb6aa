//! Static HTML heatmap of symbol attributions.

use serde::Serialize;

#[derive(Debug, Clone, Serialize)]
pub struct HeatmapRow<'a> {
    pub smiles: &'a str,
    pub symbols: &'a [(String, f64)],
    pub note: String,
}

fn escape(s: &str) -> String {
    s.chars()
        .map(|c| match c {
            '<' => "&lt;".to_string(),
            '>' => "&gt;".to_string(),
            '&' => "&amp;".to_string(),
            '"' => "&quot;".to_string(),
            c => c.to_string(),
        })
        .collect()
}

/// Red for positive, blue for negative, opacity scaled by `|x| / scale`.
fn color(x: f64, scale: f64) -> String {
    let a = if scale > 0.0 { (x.abs() / scale).min(1.0) } else { 0.0 };
    let (r, g, b) = if x >= 0.0 { (220, 40, 40) } else { (40, 90, 220) };
    format!("rgba({r},{g},{b},{a:.3})")
}

/// One row per molecule, each symbol shaded by its own score relative to
/// the row's largest magnitude. Brackets, parentheses and ring digits are
/// shown unshaded.
pub fn heatmap_html(title: &str, rows: &[HeatmapRow<'_>]) -> String {
    let mut out = String::new();
    out.push_str("<!DOCTYPE html>\n<html><head><meta charset=\"utf-8\">\n");
    out.push_str(&format!("<title>{}</title>\n", escape(title)));
    out.push_str(
        "<style>body{font-family:sans-serif}td{padding:4px 10px}\
         .mol{font-family:monospace;font-size:18px}.mol span{padding:1px 0}</style>\n</head><body>\n",
    );
    out.push_str(&format!("<h1>{}</h1>\n<table>\n", escape(title)));
    for row in rows {
        let scale = row.symbols.iter().filter(|(s, _)| shaded(s)).fold(0.0f64, |m, (_, x)| m.max(x.abs()));
        out.push_str("<tr><td class=\"mol\">");
        for (sym, x) in row.symbols {
            if shaded(sym) {
                out.push_str(&format!(
                    "<span title=\"{:.4e}\" style=\"background:{}\">{}</span>",
                    x,
                    color(*x, scale),
                    escape(sym)
                ));
            } else {
                out.push_str(&format!("<span>{}</span>", escape(sym)));
            }
        }
        out.push_str(&format!("</td><td>{}</td></tr>\n", escape(&row.note)));
    }
    out.push_str("</table>\n</body></html>\n");
    out
}

fn shaded(sym: &str) -> bool {
    !(sym.is_empty()
        || matches!(sym, "(" | ")" | "." | "%")
        || sym.starts_with('%')
        || sym.chars().all(|c| c.is_ascii_digit())
        || sym.starts_with('<'))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn escapes_and_skips_structure_symbols() {
        let symbols = vec![("C".to_string(), 1.0), ("(".to_string(), 5.0), ("[nH]".to_string(), -0.5), ("1".to_string(), 9.0)];
        let html = heatmap_html("a<b", &[HeatmapRow { smiles: "C([nH])1", symbols: &symbols, note: "x".into() }]);
        assert!(html.contains("a&lt;b"));
        assert!(html.contains("rgba(220,40,40,1.000)"));
        assert!(html.contains("rgba(40,90,220,0.500)"));
        assert!(html.contains("<span>(</span>"));
        assert!(html.contains("<span>1</span>"));
    }
}
