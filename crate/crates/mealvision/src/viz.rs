//! Image outputs: detection overlays, depth visualizations, loss and
//! precision-recall curves, and the confusion-matrix heatmap. Text is drawn
//! with a built-in 5x7 bitmap font so the renderings have no external
//! dependencies.

use std::path::Path;

use crate::dataset::Rgb8Image;
use crate::geometry::DepthMap;
use crate::metrics::ConfusionMatrix;
use crate::model::Detection;

/// 5x7 glyphs; 7 rows of 5 bits each, top to bottom.
fn glyph(c: char) -> [u8; 7] {
    match c.to_ascii_uppercase() {
        'A' => [0x0E, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'B' => [0x1E, 0x11, 0x11, 0x1E, 0x11, 0x11, 0x1E],
        'C' => [0x0E, 0x11, 0x10, 0x10, 0x10, 0x11, 0x0E],
        'D' => [0x1C, 0x12, 0x11, 0x11, 0x11, 0x12, 0x1C],
        'E' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x1F],
        'F' => [0x1F, 0x10, 0x10, 0x1E, 0x10, 0x10, 0x10],
        'G' => [0x0E, 0x11, 0x10, 0x17, 0x11, 0x11, 0x0F],
        'H' => [0x11, 0x11, 0x11, 0x1F, 0x11, 0x11, 0x11],
        'I' => [0x0E, 0x04, 0x04, 0x04, 0x04, 0x04, 0x0E],
        'J' => [0x07, 0x02, 0x02, 0x02, 0x02, 0x12, 0x0C],
        'K' => [0x11, 0x12, 0x14, 0x18, 0x14, 0x12, 0x11],
        'L' => [0x10, 0x10, 0x10, 0x10, 0x10, 0x10, 0x1F],
        'M' => [0x11, 0x1B, 0x15, 0x15, 0x11, 0x11, 0x11],
        'N' => [0x11, 0x19, 0x15, 0x13, 0x11, 0x11, 0x11],
        'O' => [0x0E, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'P' => [0x1E, 0x11, 0x11, 0x1E, 0x10, 0x10, 0x10],
        'Q' => [0x0E, 0x11, 0x11, 0x11, 0x15, 0x12, 0x0D],
        'R' => [0x1E, 0x11, 0x11, 0x1E, 0x14, 0x12, 0x11],
        'S' => [0x0F, 0x10, 0x10, 0x0E, 0x01, 0x01, 0x1E],
        'T' => [0x1F, 0x04, 0x04, 0x04, 0x04, 0x04, 0x04],
        'U' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x11, 0x0E],
        'V' => [0x11, 0x11, 0x11, 0x11, 0x11, 0x0A, 0x04],
        'W' => [0x11, 0x11, 0x11, 0x15, 0x15, 0x15, 0x0A],
        'X' => [0x11, 0x11, 0x0A, 0x04, 0x0A, 0x11, 0x11],
        'Y' => [0x11, 0x11, 0x0A, 0x04, 0x04, 0x04, 0x04],
        'Z' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x10, 0x1F],
        '0' => [0x0E, 0x11, 0x13, 0x15, 0x19, 0x11, 0x0E],
        '1' => [0x04, 0x0C, 0x04, 0x04, 0x04, 0x04, 0x0E],
        '2' => [0x0E, 0x11, 0x01, 0x02, 0x04, 0x08, 0x1F],
        '3' => [0x1F, 0x02, 0x04, 0x02, 0x01, 0x11, 0x0E],
        '4' => [0x02, 0x06, 0x0A, 0x12, 0x1F, 0x02, 0x02],
        '5' => [0x1F, 0x10, 0x1E, 0x01, 0x01, 0x11, 0x0E],
        '6' => [0x06, 0x08, 0x10, 0x1E, 0x11, 0x11, 0x0E],
        '7' => [0x1F, 0x01, 0x02, 0x04, 0x08, 0x08, 0x08],
        '8' => [0x0E, 0x11, 0x11, 0x0E, 0x11, 0x11, 0x0E],
        '9' => [0x0E, 0x11, 0x11, 0x0F, 0x01, 0x02, 0x0C],
        '.' => [0x00, 0x00, 0x00, 0x00, 0x00, 0x0C, 0x0C],
        ',' => [0x00, 0x00, 0x00, 0x00, 0x0C, 0x04, 0x08],
        ':' => [0x00, 0x0C, 0x0C, 0x00, 0x0C, 0x0C, 0x00],
        '-' => [0x00, 0x00, 0x00, 0x1F, 0x00, 0x00, 0x00],
        '+' => [0x00, 0x04, 0x04, 0x1F, 0x04, 0x04, 0x00],
        '%' => [0x19, 0x19, 0x02, 0x04, 0x08, 0x13, 0x13],
        '/' => [0x01, 0x02, 0x02, 0x04, 0x08, 0x08, 0x10],
        '(' => [0x02, 0x04, 0x08, 0x08, 0x08, 0x04, 0x02],
        ')' => [0x08, 0x04, 0x02, 0x02, 0x02, 0x04, 0x08],
        '=' => [0x00, 0x00, 0x1F, 0x00, 0x1F, 0x00, 0x00],
        _ => [0x00; 7],
    }
}

pub fn draw_text(img: &mut Rgb8Image, x: usize, y: usize, text: &str, color: [u8; 3]) {
    let mut cx = x;
    for c in text.chars() {
        let g = glyph(c);
        for (row, bits) in g.iter().enumerate() {
            for col in 0..5 {
                if bits & (0x10 >> col) != 0 {
                    let (px, py) = (cx + col, y + row);
                    if px < img.width && py < img.height {
                        img.set(px, py, color);
                    }
                }
            }
        }
        cx += 6;
    }
}

fn draw_rect(img: &mut Rgb8Image, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
    let x1 = x1.min(img.width.saturating_sub(1));
    let y1 = y1.min(img.height.saturating_sub(1));
    for x in x0..=x1 {
        img.set(x, y0, color);
        img.set(x, y1, color);
    }
    for y in y0..=y1 {
        img.set(x0, y, color);
        img.set(x1, y, color);
    }
}

fn draw_line(img: &mut Rgb8Image, x0: f64, y0: f64, x1: f64, y1: f64, color: [u8; 3]) {
    let steps = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = x0 + (x1 - x0) * t;
        let y = y0 + (y1 - y0) * t;
        if x >= 0.0 && y >= 0.0 && (x as usize) < img.width && (y as usize) < img.height {
            img.set(x as usize, y as usize, color);
        }
    }
}

fn fill_rect(img: &mut Rgb8Image, x0: usize, y0: usize, x1: usize, y1: usize, color: [u8; 3]) {
    for y in y0..y1.min(img.height) {
        for x in x0..x1.min(img.width) {
            img.set(x, y, color);
        }
    }
}

/// One distinct color per class index.
pub fn class_color(class_id: usize) -> [u8; 3] {
    const PALETTE: [[u8; 3]; 8] = [
        [230, 80, 60],
        [60, 140, 230],
        [240, 160, 30],
        [90, 200, 90],
        [180, 90, 220],
        [40, 200, 200],
        [230, 120, 180],
        [160, 160, 60],
    ];
    PALETTE[class_id % PALETTE.len()]
}

/// The input image with per-detection mask tint, box and a label carrying
/// the class name and predicted volume.
pub fn render_overlay(
    rgb: &Rgb8Image,
    detections: &[Detection],
    class_names: &[String],
) -> Rgb8Image {
    let mut out = rgb.clone();
    for det in detections {
        let color = class_color(det.class_id);
        for y in 0..out.height {
            for x in 0..out.width {
                if det.mask.get(x, y) {
                    let px = out.get(x, y);
                    out.set(
                        x,
                        y,
                        [
                            ((px[0] as u16 + color[0] as u16 * 2) / 3) as u8,
                            ((px[1] as u16 + color[1] as u16 * 2) / 3) as u8,
                            ((px[2] as u16 + color[2] as u16 * 2) / 3) as u8,
                        ],
                    );
                }
            }
        }
    }
    for det in detections {
        let color = class_color(det.class_id);
        if det.bbox.x_max > det.bbox.x_min && det.bbox.y_max > det.bbox.y_min {
            draw_rect(
                &mut out,
                det.bbox.x_min,
                det.bbox.y_min,
                det.bbox.x_max.saturating_sub(1),
                det.bbox.y_max.saturating_sub(1),
                color,
            );
        }
        let name = class_names
            .get(det.class_id)
            .map(String::as_str)
            .unwrap_or("item");
        let label = format!("{} {:.0}ML", name, det.volume_ml);
        let ty = det.bbox.y_min.saturating_sub(9);
        draw_text(&mut out, det.bbox.x_min, ty, &label, [255, 255, 255]);
    }
    out
}

/// Depth in [0, 1] m mapped linearly to grayscale (near = bright).
pub fn depth_to_image(depth: &DepthMap) -> Rgb8Image {
    let mut img = Rgb8Image::new(depth.width(), depth.height());
    for y in 0..depth.height() {
        for x in 0..depth.width() {
            let v = (255.0 * (1.0 - depth.get(x, y).clamp(0.0, 1.0))).round() as u8;
            img.set(x, y, [v, v, v]);
        }
    }
    img
}

pub fn save_image(img: &Rgb8Image, path: &Path) -> Result<(), image::ImageError> {
    let buffer =
        image::RgbImage::from_raw(img.width as u32, img.height as u32, img.data.clone())
            .expect("buffer size");
    buffer.save(path)
}

/// Named series sharing an x axis.
pub struct Series {
    pub name: String,
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// Simple line plot with boxed axes, tick labels, and a legend. Axes run
/// left-to-right and bottom-to-top in increasing order.
pub fn plot_series(title: &str, series: &[Series], width: usize, height: usize) -> Rgb8Image {
    let mut img = Rgb8Image::new(width, height);
    fill_rect(&mut img, 0, 0, width, height, [250, 250, 250]);
    let (ml, mr, mt, mb) = (56, 16, 24, 34); // margins
    let (x0, y0) = (ml, height - mb);
    let (x1, y1) = (width - mr, mt);
    draw_rect(&mut img, ml, mt, width - mr, height - mb, [30, 30, 30]);
    draw_text(&mut img, ml, 8, title, [20, 20, 20]);

    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        return img;
    }
    if (max_x - min_x).abs() < 1e-12 {
        max_x = min_x + 1.0;
    }
    if (max_y - min_y).abs() < 1e-12 {
        max_y = min_y + 1.0;
    }
    let to_px = |x: f64, y: f64| -> (f64, f64) {
        (
            x0 as f64 + (x - min_x) / (max_x - min_x) * (x1 - x0) as f64,
            y0 as f64 - (y - min_y) / (max_y - min_y) * (y0 - y1) as f64,
        )
    };
    // tick labels at the extremes
    draw_text(&mut img, ml, height - mb + 4, &format!("{min_x:.0}"), [20, 20, 20]);
    let max_x_label = format!("{max_x:.0}");
    draw_text(
        &mut img,
        (width - mr).saturating_sub(max_x_label.len() * 6),
        height - mb + 4,
        &max_x_label,
        [20, 20, 20],
    );
    draw_text(&mut img, 2, y1, &format!("{max_y:.2}"), [20, 20, 20]);
    draw_text(&mut img, 2, y0.saturating_sub(7), &format!("{min_y:.2}"), [20, 20, 20]);

    for (i, s) in series.iter().enumerate() {
        for pair in s.points.windows(2) {
            let (ax, ay) = to_px(pair[0].0, pair[0].1);
            let (bx, by) = to_px(pair[1].0, pair[1].1);
            draw_line(&mut img, ax, ay, bx, by, s.color);
        }
        let ly = mt + 4 + i * 9;
        if ly + 8 < height {
            fill_rect(&mut img, x1.saturating_sub(70), ly, x1.saturating_sub(62), ly + 7, s.color);
            draw_text(&mut img, x1.saturating_sub(58), ly, &s.name, [20, 20, 20]);
        }
    }
    img
}

/// Confusion-matrix heatmap with per-cell percentages and annotated row
/// sums (instance counts).
pub fn confusion_heatmap(matrix: &ConfusionMatrix, class_names: &[String]) -> Rgb8Image {
    let cell = 52;
    let left = 70;
    let top = 36;
    let cols = matrix.classes + 1;
    let width = left + cols * cell + 80;
    let height = top + matrix.classes * cell + 16;
    let mut img = Rgb8Image::new(width, height);
    fill_rect(&mut img, 0, 0, width, height, [250, 250, 250]);
    let pct = matrix.percentages();
    for (row, name) in class_names.iter().enumerate().take(matrix.classes) {
        draw_text(&mut img, 2, top + row * cell + cell / 2 - 3, name, [20, 20, 20]);
        let row_total: u64 = (0..=matrix.classes).map(|c| matrix.at(row, c)).sum();
        for col in 0..cols {
            let p = pct[row][col];
            let shade = (255.0 - p * 1.9) as u8;
            let color = if col == matrix.classes {
                [255, shade, shade] // missed column in red
            } else {
                [shade, shade, 255]
            };
            let x = left + col * cell;
            let y = top + row * cell;
            fill_rect(&mut img, x, y, x + cell - 2, y + cell - 2, color);
            let label = format!("{p:.0}");
            draw_text(&mut img, x + cell / 2 - label.len() * 3, y + cell / 2 - 3, &label, [10, 10, 10]);
        }
        draw_text(
            &mut img,
            left + cols * cell + 6,
            top + row * cell + cell / 2 - 3,
            &format!("N={row_total}"),
            [20, 20, 20],
        );
    }
    for (col, name) in class_names.iter().enumerate().take(matrix.classes) {
        draw_text(&mut img, left + col * cell + 2, top - 12, name, [20, 20, 20]);
    }
    draw_text(&mut img, left + matrix.classes * cell + 2, top - 12, "MISSED", [120, 20, 20]);
    img
}
