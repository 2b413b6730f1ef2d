use super::{Result, ScanError};

/// Mod-10 check over a string of decimal digits.
///
/// The rightmost digit is the check digit; every second digit to its left
/// is doubled, with 9 subtracted when the product exceeds 9.
pub fn luhn_check(digits: &str) -> Result<bool> {
    if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
        return Err(ScanError::NonDigitInput);
    }
    Ok(luhn_valid(digits.as_bytes()))
}

/// As [`luhn_check`] over ASCII digits already known to be valid.
pub(crate) fn luhn_valid(digits: &[u8]) -> bool {
    let mut sum = 0u32;
    for (i, &b) in digits.iter().rev().enumerate() {
        let d = u32::from(b - b'0');
        sum += if i % 2 == 1 {
            let twice = d * 2;
            if twice > 9 {
                twice - 9
            } else {
                twice
            }
        } else {
            d
        };
    }
    sum.is_multiple_of(10)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zeros_pass() {
        assert!(luhn_check("0000000000000000").unwrap());
    }

    #[test]
    fn test_card() {
        assert!(luhn_check("4111111111111111").unwrap());
        assert!(!luhn_check("4111111111111112").unwrap());
    }

    #[test]
    fn published_test_numbers() {
        for pan in ["378282246310005", "5555555555554444", "6011111111111117", "4222222222222", "3530111333300000"] {
            assert!(luhn_check(pan).unwrap(), "{pan}");
        }
    }

    #[test]
    fn rejects_non_digits() {
        assert!(matches!(luhn_check("4111 1111"), Err(ScanError::NonDigitInput)));
        assert!(matches!(luhn_check("41a1"), Err(ScanError::NonDigitInput)));
        assert!(matches!(luhn_check(""), Err(ScanError::NonDigitInput)));
    }
}
