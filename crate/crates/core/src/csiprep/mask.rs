//! Usable-subcarrier tables.
//!
//! Row `j` of a CSI matrix with `n` subcarriers holds tone `k = j − n/2`
//! (centred order). The tables drop DC, guard and pilot tones of 802.11ac.

use super::{PrepError, Result};

/// Bumped whenever a table below changes.
pub const MASK_TABLE_VERSION: u32 = 1;

/// 80 MHz: DC ±1, guards below −122 and above 122, pilots ±11 ±39 ±75 ±103.
const VHT80_PILOTS: [i32; 8] = [-103, -75, -39, -11, 11, 39, 75, 103];
/// 20 MHz: DC, guards below −28 and above 28, pilots ±7 ±21.
const VHT20_PILOTS: [i32; 4] = [-21, -7, 7, 21];

/// Centred tone index of row `row` for `n` subcarriers.
pub fn tone_index(row: usize, n: usize) -> i32 {
    row as i32 - (n / 2) as i32
}

/// Default usable mask for an `n`-point FFT. Supported sizes are 64 (52
/// usable) and 256 (234 usable).
pub fn usable_mask(n: usize) -> Result<Vec<bool>> {
    let (edge, dc, pilots): (i32, i32, &[i32]) = match n {
        256 => (122, 1, &VHT80_PILOTS),
        64 => (28, 0, &VHT20_PILOTS),
        _ => {
            return Err(PrepError::Shape(format!(
                "no default subcarrier mask for an FFT of {n}"
            )))
        }
    };
    Ok((0..n)
        .map(|row| {
            let k = tone_index(row, n);
            k.abs() > dc && k.abs() <= edge && !pilots.contains(&k)
        })
        .collect())
}

/// Centred tone indices of the usable rows.
pub fn usable_tones(mask: &[bool]) -> Vec<f64> {
    mask.iter()
        .enumerate()
        .filter(|(_, &u)| u)
        .map(|(row, _)| tone_index(row, mask.len()) as f64)
        .collect()
}

/// Zero every non-usable row of a `rows × cols` row-major matrix.
pub fn mask_subcarriers(matrix: &mut [f64], cols: usize, mask: &[bool]) -> Result<()> {
    if cols == 0 || matrix.len() != mask.len() * cols {
        return Err(PrepError::Shape(format!(
            "matrix of {} values does not have {} rows of {cols}",
            matrix.len(),
            mask.len()
        )));
    }
    for (row, &usable) in matrix.chunks_mut(cols).zip(mask) {
        if !usable {
            row.fill(0.0);
        }
    }
    Ok(())
}
