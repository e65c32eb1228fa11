use serde::{Deserialize, Serialize};

/// Named entity colors and their palette indices. Each lands in a distinct
/// group of four palette indices so coarse histograms keep them apart.
pub const NAMED_COLORS: [(&str, u8); 8] = [
    ("red", 4),
    ("green", 8),
    ("blue", 12),
    ("yellow", 16),
    ("cyan", 20),
    ("magenta", 24),
    ("orange", 28),
    ("purple", 32),
];

pub fn color_name(index: u8) -> Option<&'static str> {
    NAMED_COLORS
        .iter()
        .find(|(_, i)| *i == index)
        .map(|(n, _)| *n)
}

pub fn color_index(name: &str) -> Option<u8> {
    NAMED_COLORS
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, i)| *i)
}

/// RGB for any palette index; named colors get their canonical values.
pub fn rgb(index: u8) -> [u8; 3] {
    match index {
        0 => [16, 16, 20],
        4 => [220, 40, 40],
        8 => [40, 180, 70],
        12 => [50, 90, 230],
        16 => [240, 220, 50],
        20 => [60, 220, 230],
        24 => [220, 60, 210],
        28 => [250, 150, 30],
        32 => [140, 70, 200],
        i => {
            // Remaining indices walk the hue wheel at reduced saturation.
            let hue = (i as f64 * 137.5) % 360.0;
            hsv_to_rgb(hue, 0.45, 0.75)
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [u8; 3] {
    let c = v * s;
    let x = c * (1.0 - ((h / 60.0) % 2.0 - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match (h / 60.0) as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    [
        ((r + m) * 255.0).round() as u8,
        ((g + m) * 255.0).round() as u8,
        ((b + m) * 255.0).round() as u8,
    ]
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

impl Shape {
    pub const ALL: [Shape; 3] = [Shape::Square, Shape::Circle, Shape::Triangle];

    pub fn name(self) -> &'static str {
        match self {
            Shape::Square => "square",
            Shape::Circle => "circle",
            Shape::Triangle => "triangle",
        }
    }

    pub fn from_name(name: &str) -> Option<Shape> {
        Shape::ALL.into_iter().find(|s| s.name() == name)
    }

    /// Occupancy template for a `rows x cols` extent, row-major.
    ///
    /// Circles drop the four corner cells; triangles fill the lower-left
    /// half up to the corner-to-corner diagonal, so every template touches
    /// all four sides of its extent.
    pub fn mask(self, rows: usize, cols: usize) -> Vec<bool> {
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                let filled = match self {
                    Shape::Square => true,
                    Shape::Circle => {
                        let edge_r = r == 0 || r + 1 == rows;
                        let edge_c = c == 0 || c + 1 == cols;
                        !(edge_r && edge_c) || rows < 3 || cols < 3
                    }
                    Shape::Triangle => c * rows.saturating_sub(1) <= r * cols.saturating_sub(1),
                };
                out.push(filled);
            }
        }
        out
    }
}

/// A reference appearance the user can pick instead of uploading a crop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Swatch {
    /// `"<color>-<shape>"`, e.g. `"red-square"`.
    pub id: String,
    pub color: String,
    pub shape: Shape,
    pub palette_index: u8,
    pub rgb: [u8; 3],
    pub rows: usize,
    pub cols: usize,
    /// Row-major palette indices of the crop.
    pub cells: Vec<u8>,
}

/// Every named color rendered as every shape on a `size x size` crop.
pub fn swatch_catalog(size: usize) -> Vec<Swatch> {
    let mut out = Vec::with_capacity(NAMED_COLORS.len() * Shape::ALL.len());
    for (name, index) in NAMED_COLORS {
        for shape in Shape::ALL {
            let cells = shape
                .mask(size, size)
                .into_iter()
                .map(|filled| if filled { index } else { 0 })
                .collect();
            out.push(Swatch {
                id: format!("{name}-{}", shape.name()),
                color: name.to_string(),
                shape,
                palette_index: index,
                rgb: rgb(index),
                rows: size,
                cols: size,
                cells,
            });
        }
    }
    out
}
