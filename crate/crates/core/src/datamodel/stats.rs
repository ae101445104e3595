use crate::error::{Error, Result};

use super::io::read_mask_png;
use super::types::{ClassTable, DatasetIndex, FrequencyRow, FrequencyTable, LabelMask};

/// Counts pixels per class over an indexed split; ignore pixels excluded
/// from both counts and percentages.
pub fn compute_class_frequencies(index: &DatasetIndex, table: &ClassTable) -> Result<FrequencyTable> {
    let mut masks = Vec::with_capacity(index.len());
    for (_, mask_path) in &index.pairs {
        let mask = read_mask_png(mask_path)?;
        mask.validate(table)
            .map_err(|e| Error::Validation(format!("{}: {e}", mask_path.display())))?;
        masks.push(mask);
    }
    frequencies_of_masks(masks.iter(), table)
}

/// Same accumulation over in-memory masks. Masks must already be valid for `table`.
pub fn frequencies_of_masks<'a>(
    masks: impl Iterator<Item = &'a LabelMask>,
    table: &ClassTable,
) -> Result<FrequencyTable> {
    let c = table.num_classes();
    let mut counts = vec![0u64; c];
    for mask in masks {
        for (i, &v) in mask.data.iter().enumerate() {
            if v == table.ignore_id {
                continue;
            }
            if (v as usize) >= c {
                return Err(Error::Validation(format!(
                    "invalid class id {} at pixel (row {}, col {})",
                    v,
                    i / mask.width,
                    i % mask.width
                )));
            }
            counts[v as usize] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    let rows = table
        .classes
        .iter()
        .map(|def| FrequencyRow {
            class_id: def.id,
            name: def.name.clone(),
            pixel_count: counts[def.id as usize],
            percent: if total == 0 {
                0.0
            } else {
                100.0 * counts[def.id as usize] as f64 / total as f64
            },
        })
        .collect();
    Ok(FrequencyTable {
        rows,
        total_valid_pixels: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datamodel::types::IGNORE_ID;

    #[test]
    fn single_class_mask_is_100_percent() {
        let table = ClassTable::default_11();
        let mask = LabelMask::filled(2, 2, 0);
        let ft = frequencies_of_masks(std::iter::once(&mask), &table).unwrap();
        assert_eq!(ft.percent_of(0), 100.0);
        assert_eq!(ft.total_valid_pixels, 4);
        for id in 1..11 {
            assert_eq!(ft.percent_of(id), 0.0);
        }
    }

    #[test]
    fn hand_placed_labels_match_brute_force_count() {
        // Two 4x4 masks; expected percentages computed by direct pixel
        // counting over all 32 pixels (4 of them ignored).
        let table = ClassTable::default_11();
        let mut a = LabelMask::filled(4, 4, 0);
        let mut b = LabelMask::filled(4, 4, 8);
        a.set(0, 0, 3);
        a.set(0, 1, 3);
        a.set(1, 2, 4);
        a.set(3, 3, IGNORE_ID);
        b.set(2, 0, 1);
        b.set(2, 1, 1);
        b.set(2, 2, 1);
        b.set(3, 0, IGNORE_ID);
        b.set(3, 1, IGNORE_ID);
        b.set(3, 2, IGNORE_ID);

        // Brute-force oracle over every pixel.
        let mut counts = [0u64; 11];
        let mut valid = 0u64;
        for m in [&a, &b] {
            for &v in &m.data {
                if v != IGNORE_ID {
                    counts[v as usize] += 1;
                    valid += 1;
                }
            }
        }
        assert_eq!(valid, 28);

        let ft = frequencies_of_masks([&a, &b].into_iter(), &table).unwrap();
        assert_eq!(ft.total_valid_pixels, valid);
        for id in 0u8..11 {
            let row = &ft.rows[id as usize];
            assert_eq!(row.pixel_count, counts[id as usize]);
            let expect = 100.0 * counts[id as usize] as f64 / valid as f64;
            assert!((row.percent - expect).abs() < 1e-12);
        }
        // Percentages sum to 100 within 0.01 (ignore-excluded).
        let sum: f64 = ft.rows.iter().map(|r| r.percent).sum();
        assert!((sum - 100.0).abs() < 0.01);
    }

    #[test]
    fn out_of_range_id_reports_location() {
        let table = ClassTable::default_11();
        let mut m = LabelMask::filled(3, 3, 0);
        m.set(1, 2, 99);
        let err = frequencies_of_masks(std::iter::once(&m), &table)
            .unwrap_err()
            .to_string();
        assert!(err.contains("99") && err.contains("row 1") && err.contains("col 2"), "{err}");
    }

    #[test]
    fn csv_layout() {
        let table = ClassTable::default_11();
        let mask = LabelMask::filled(1, 2, 9);
        let ft = frequencies_of_masks(std::iter::once(&mask), &table).unwrap();
        let csv = ft.to_csv();
        assert!(csv.starts_with("class_id,name,pixel_count,percent\n"));
        assert!(csv.contains("9,Pool,2,100.0000"));
    }
}
