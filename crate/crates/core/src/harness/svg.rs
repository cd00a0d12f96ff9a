//! Minimal hand-rolled SVG line charts. Charts are rendered purely from
//! tabular data so re-rendering from the emitted CSV reproduces identical
//! bytes; every coordinate is formatted with a fixed precision.

/// One named curve: (label, points).
pub type Curve = (String, Vec<(f64, f64)>);

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 150.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 50.0;

const PALETTE: [&str; 6] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b",
];

fn fmt(v: f64) -> String {
    format!("{v:.2}")
}

/// Render a line chart. With `log_y` the ordinate is log10-scaled; all y
/// values must then be positive.
pub fn line_chart(
    title: &str,
    x_label: &str,
    y_label: &str,
    curves: &[Curve],
    log_y: bool,
) -> String {
    let ty = |y: f64| if log_y { y.log10() } else { y };
    let mut x_min = f64::INFINITY;
    let mut x_max = f64::NEG_INFINITY;
    let mut y_min = f64::INFINITY;
    let mut y_max = f64::NEG_INFINITY;
    for (_, pts) in curves {
        for &(x, y) in pts {
            x_min = x_min.min(x);
            x_max = x_max.max(x);
            y_min = y_min.min(ty(y));
            y_max = y_max.max(ty(y));
        }
    }
    if !x_min.is_finite() {
        // no data: render an empty frame
        x_min = 0.0;
        x_max = 1.0;
        y_min = 0.0;
        y_max = 1.0;
    }
    if x_max == x_min {
        x_max = x_min + 1.0;
    }
    if y_max == y_min {
        y_max = y_min + 1.0;
    }
    let plot_w = WIDTH - MARGIN_L - MARGIN_R;
    let plot_h = HEIGHT - MARGIN_T - MARGIN_B;
    let px = |x: f64| MARGIN_L + (x - x_min) / (x_max - x_min) * plot_w;
    let py = |y: f64| MARGIN_T + plot_h - (ty(y) - y_min) / (y_max - y_min) * plot_h;

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n"
    ));
    s.push_str("<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n");
    s.push_str(&format!(
        "<text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"16\">{title}</text>\n",
        MARGIN_L + plot_w / 2.0
    ));
    // axes
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T),
        fmt(MARGIN_L),
        fmt(MARGIN_T + plot_h)
    ));
    s.push_str(&format!(
        "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"black\"/>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T + plot_h),
        fmt(MARGIN_L + plot_w),
        fmt(MARGIN_T + plot_h)
    ));
    // tick labels at the extremes
    let y_lo_label = if log_y { format!("1e{}", fmt(y_min)) } else { fmt(y_min) };
    let y_hi_label = if log_y { format!("1e{}", fmt(y_max)) } else { fmt(y_max) };
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(MARGIN_L - 6.0),
        fmt(MARGIN_T + plot_h + 4.0),
        y_lo_label
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"end\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(MARGIN_L - 6.0),
        fmt(MARGIN_T + 4.0),
        y_hi_label
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(MARGIN_L),
        fmt(MARGIN_T + plot_h + 20.0),
        fmt(x_min)
    ));
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"11\">{}</text>\n",
        fmt(MARGIN_L + plot_w),
        fmt(MARGIN_T + plot_h + 20.0),
        fmt(x_max)
    ));
    // axis titles
    s.push_str(&format!(
        "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"13\">{x_label}</text>\n",
        fmt(MARGIN_L + plot_w / 2.0),
        fmt(HEIGHT - 12.0)
    ));
    s.push_str(&format!(
        "<text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"monospace\" \
         font-size=\"13\" transform=\"rotate(-90 18 {})\">{y_label}</text>\n",
        fmt(MARGIN_T + plot_h / 2.0),
        fmt(MARGIN_T + plot_h / 2.0)
    ));
    // curves + legend
    for (ci, (label, pts)) in curves.iter().enumerate() {
        let color = PALETTE[ci % PALETTE.len()];
        let coords: Vec<String> = pts
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
            .collect();
        s.push_str(&format!(
            "<polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" \
             points=\"{}\"/>\n",
            coords.join(" ")
        ));
        for &(x, y) in pts {
            s.push_str(&format!(
                "<circle cx=\"{}\" cy=\"{}\" r=\"2.5\" fill=\"{color}\"/>\n",
                fmt(px(x)),
                fmt(py(y))
            ));
        }
        let ly = MARGIN_T + 16.0 * ci as f64;
        s.push_str(&format!(
            "<line x1=\"{}\" y1=\"{}\" x2=\"{}\" y2=\"{}\" stroke=\"{color}\" \
             stroke-width=\"1.5\"/>\n",
            fmt(WIDTH - MARGIN_R + 10.0),
            fmt(ly),
            fmt(WIDTH - MARGIN_R + 30.0),
            fmt(ly)
        ));
        s.push_str(&format!(
            "<text x=\"{}\" y=\"{}\" font-family=\"monospace\" font-size=\"11\">{label}</text>\n",
            fmt(WIDTH - MARGIN_R + 36.0),
            fmt(ly + 4.0)
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample_curves() -> Vec<Curve> {
        vec![
            ("a".into(), vec![(1.0, 10.0), (2.0, 5.0), (3.0, 2.0)]),
            ("b".into(), vec![(1.0, 20.0), (2.0, 12.0), (3.0, 6.0)]),
        ]
    }

    #[test]
    fn rendering_is_deterministic() {
        let a = line_chart("t", "x", "y", &sample_curves(), true);
        let b = line_chart("t", "x", "y", &sample_curves(), true);
        assert_eq!(a, b);
    }

    #[test]
    fn contains_one_polyline_per_curve() {
        let svg = line_chart("t", "x", "y", &sample_curves(), false);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("</svg>"));
        assert!(svg.contains(">t</text>"));
    }

    #[test]
    fn log_scale_orders_points_correctly() {
        // with log y, the geometric midpoint maps to the pixel midpoint
        let curves = vec![("c".to_string(), vec![(0.0, 1.0), (1.0, 10.0), (2.0, 100.0)])];
        let svg = line_chart("t", "x", "y", &curves, true);
        // plot height 390, so the middle point sits at MARGIN_T + 195
        assert!(svg.contains("cy=\"235.00\""), "svg: {svg}");
    }

    #[test]
    fn empty_input_still_renders_a_frame() {
        let svg = line_chart("empty", "x", "y", &[], false);
        assert!(svg.contains("</svg>"));
    }
}
