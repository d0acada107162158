//! Symmetric per-row int8 compression with max-abs scaling.
//!
//! One scale per payload row: scale = max|x_i| / 127 (1.0 for all-zero rows),
//! q_i = round(x_i / scale) with ties away from zero, clamped to [-127, 127].
//! Dequantization is q_i * scale, so every element lands within scale/2 of
//! the original.

pub const Q_MAX: f32 = 127.0;

/// A quantized payload row: int8 values plus the row scale.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantRow {
    pub q: Vec<i8>,
    pub scale: f32,
}

/// Quantize into a caller-provided buffer; returns the row scale.
pub fn quantize_row_into(row: &[f32], q: &mut [i8]) -> f32 {
    debug_assert_eq!(row.len(), q.len());
    let mut max_abs = 0.0f32;
    for &v in row {
        let a = v.abs();
        if a > max_abs {
            max_abs = a;
        }
    }
    if max_abs == 0.0 {
        q.fill(0);
        return 1.0;
    }
    let scale = max_abs / Q_MAX;
    for (qi, &v) in q.iter_mut().zip(row) {
        // f32::round ties away from zero; the clamp guards the one-ulp case
        // where v/scale lands just above 127.
        *qi = (v / scale).round().clamp(-Q_MAX, Q_MAX) as i8;
    }
    scale
}

pub fn quantize_row(row: &[f32]) -> QuantRow {
    let mut q = vec![0i8; row.len()];
    let scale = quantize_row_into(row, &mut q);
    QuantRow { q, scale }
}

/// Reconstruct a row: out_i = q_i * scale.
pub fn dequantize_into(q: &[i8], scale: f32, out: &mut [f32]) {
    debug_assert_eq!(q.len(), out.len());
    for (o, &qi) in out.iter_mut().zip(q) {
        *o = qi as f32 * scale;
    }
}
