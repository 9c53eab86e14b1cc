//! Binary greyscale PGM output.

/// Min-max scale to `0..=255`. A constant map becomes mid-grey.
pub fn normalize(map: &[f32]) -> Vec<u8> {
    let (lo, hi) = map
        .iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(hi > lo) {
        return vec![128; map.len()];
    }
    map.iter().map(|&v| ((v - lo) / (hi - lo) * 255.0).round() as u8).collect()
}

pub fn encode(width: usize, height: usize, pixels: &[u8]) -> Vec<u8> {
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    out
}
