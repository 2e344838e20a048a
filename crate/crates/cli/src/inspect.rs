//! Cluster-assignment maps for grid checkpoints.

use ccp::{Network, Tensor};

/// Hard cluster of every input node at `level` (1-based): argmax of the
/// composed memberships `K1·K2·…·K_level`.
pub fn assignments(net: &Network, level: usize) -> Result<(Vec<usize>, usize), String> {
    if level == 0 || level > net.layers.len() {
        return Err(format!("level must be in 1..={}, got {}", net.layers.len(), level));
    }
    let ks = net.memberships();
    let mut composed: Tensor = ks[0].clone();
    for k in &ks[1..level] {
        composed = composed.matmul(k).map_err(|e| e.to_string())?;
    }
    Ok((composed.row_argmax(), composed.cols()))
}

/// `count` colors with evenly spaced hues.
pub fn palette(count: usize) -> Vec<[u8; 3]> {
    (0..count)
        .map(|c| {
            let h = 6.0 * c as f64 / count as f64;
            let x = 1.0 - ((h % 2.0) - 1.0).abs();
            let (r, g, b) = match h as usize {
                0 => (1.0, x, 0.0),
                1 => (x, 1.0, 0.0),
                2 => (0.0, 1.0, x),
                3 => (0.0, x, 1.0),
                4 => (x, 0.0, 1.0),
                _ => (1.0, 0.0, x),
            };
            [r, g, b].map(|v: f64| (v * 255.0).round() as u8)
        })
        .collect()
}

/// Binary portable pixmap of a `width × height` label map.
pub fn ppm(labels: &[usize], clusters: usize, width: usize, height: usize) -> Vec<u8> {
    let colors = palette(clusters);
    let mut out = format!("P6\n{} {}\n255\n", width, height).into_bytes();
    for &l in &labels[..width * height] {
        out.extend_from_slice(&colors[l]);
    }
    out
}

/// Fraction of pixels sharing their label with at least 3 of their
/// 8-neighbors.
pub fn contiguity(labels: &[usize], width: usize, height: usize) -> f64 {
    let mut good = 0;
    for y in 0..height {
        for x in 0..width {
            let mut same = 0;
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if (dx, dy) == (0, 0) || nx < 0 || ny < 0 || nx >= width as i64 || ny >= height as i64 {
                        continue;
                    }
                    if labels[ny as usize * width + nx as usize] == labels[y * width + x] {
                        same += 1;
                    }
                }
            }
            if same >= 3 {
                good += 1;
            }
        }
    }
    good as f64 / (width * height) as f64
}
