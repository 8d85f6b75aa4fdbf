//! Schemas of the acute-hypotension, ART-for-HIV and sepsis cohorts.
//! Numeric ranges are left empty; fit them on a training split.

use super::DatasetSchema;

const HYPOTENSION: &str = include_str!("../../fixtures/hypotension.schema.json");
const HIV: &str = include_str!("../../fixtures/hiv.schema.json");
const SEPSIS: &str = include_str!("../../fixtures/sepsis.schema.json");

fn parse(text: &str) -> DatasetSchema {
    let s: DatasetSchema = serde_json::from_str(text).expect("bundled schema parses");
    s.validate().expect("bundled schema is valid");
    s
}

/// 9 numeric, 4 categorical and 7 measured-indicator binaries over 48 hours.
pub fn hypotension() -> DatasetSchema {
    parse(HYPOTENSION)
}

/// 3 numeric, 5 binary and 5 categorical variables over up to 100 months.
pub fn hiv() -> DatasetSchema {
    parse(HIV)
}

/// 35 numeric, 3 binary and 6 categorical variables over up to 20 windows.
pub fn sepsis() -> DatasetSchema {
    parse(SEPSIS)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encoded_widths() {
        assert_eq!(hiv().width(), 37);
        assert_eq!(hypotension().width(), 54);
        assert_eq!(sepsis().width(), 104);
    }

    #[test]
    fn hypotension_csv_has_22_columns() {
        assert_eq!(hypotension().csv_header().len(), 22);
        assert_eq!(hiv().csv_header().len(), 15);
    }
}
