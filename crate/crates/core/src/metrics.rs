use crate::array::ComplexArray;
use crate::error::{invalid, Result};
use crate::Scalar;

/// `||x - ref|| / ||ref||` over complex values.
pub fn nrmse<T: Scalar>(x: &ComplexArray<T>, reference: &ComplexArray<T>) -> Result<f64> {
    x.check_same_shape(reference)?;
    let den: f64 = reference.data().iter().map(|v| v.norm_sqr().as_f64()).sum();
    if den == 0.0 {
        return Err(invalid("NRMSE reference is all zero"));
    }
    let num: f64 = x.data().iter().zip(reference.data()).map(|(a, b)| (*a - *b).norm_sqr().as_f64()).sum();
    Ok((num / den).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::phantom::make_phantom;

    #[test]
    fn closed_forms() {
        let r = make_phantom::<f64>(32, 32, 0).unwrap();
        assert_eq!(nrmse(&r, &r).unwrap(), 0.0);
        assert!((nrmse(&ComplexArray::zeros(&[32, 32]), &r).unwrap() - 1.0).abs() < 1e-15);
        assert!((nrmse(&r.scale(2.0), &r).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn rejects_zero_reference_and_mismatch() {
        let z = ComplexArray::<f32>::zeros(&[4, 4]);
        assert!(nrmse(&z, &z).is_err());
        assert!(nrmse(&ComplexArray::<f32>::zeros(&[4, 2]), &z).is_err());
    }
}
