use serde::{Deserialize, Serialize};

use super::{Geodetic, GeometryError};
use crate::Pixel;

pub const RPC_TERMS: usize = 20;

const DOMAIN_LIMIT: f64 = 1.5;
const MIN_DENOMINATOR: f64 = 1e-12;

/// Rational polynomial camera mapping ground to image.
///
/// Coefficients follow the RPC00B monomial order in normalized
/// longitude `L`, latitude `P` and height `H`:
///
/// `1, L, P, H, LP, LH, PH, L², P², H², PLH, L³, LP², LH², L²P, P³, PH², L²H, P²H, H³`
///
/// `line` is the image row and `samp` the image column.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RpcModel {
    pub line_num_coeff: [f64; RPC_TERMS],
    pub line_den_coeff: [f64; RPC_TERMS],
    pub samp_num_coeff: [f64; RPC_TERMS],
    pub samp_den_coeff: [f64; RPC_TERMS],
    pub lat_off: f64,
    pub lat_scale: f64,
    pub long_off: f64,
    pub long_scale: f64,
    pub height_off: f64,
    pub height_scale: f64,
    pub line_off: f64,
    pub line_scale: f64,
    pub samp_off: f64,
    pub samp_scale: f64,
}

/// The 20 RPC00B monomials of a normalized (L, P, H) triple.
pub fn rpc_monomials(l: f64, p: f64, h: f64) -> [f64; RPC_TERMS] {
    let (ll, pp, hh) = (l * l, p * p, h * h);
    [
        1.0,
        l,
        p,
        h,
        l * p,
        l * h,
        p * h,
        ll,
        pp,
        hh,
        p * l * h,
        ll * l,
        l * pp,
        l * hh,
        ll * p,
        pp * p,
        p * hh,
        ll * h,
        pp * h,
        hh * h,
    ]
}

fn dot(c: &[f64; RPC_TERMS], m: &[f64; RPC_TERMS]) -> f64 {
    c.iter().zip(m).map(|(a, b)| a * b).sum()
}

impl RpcModel {
    /// An RPC whose numerators and denominators are the constants 0 and 1:
    /// every ground point maps to `(line_off, samp_off)`.
    pub fn constant(line_off: f64, samp_off: f64) -> Self {
        let mut den = [0.0; RPC_TERMS];
        den[0] = 1.0;
        Self {
            line_num_coeff: [0.0; RPC_TERMS],
            line_den_coeff: den,
            samp_num_coeff: [0.0; RPC_TERMS],
            samp_den_coeff: den,
            lat_off: 0.0,
            lat_scale: 1.0,
            long_off: 0.0,
            long_scale: 1.0,
            height_off: 0.0,
            height_scale: 1.0,
            line_off,
            line_scale: 1.0,
            samp_off,
            samp_scale: 1.0,
        }
    }

    pub fn validate(&self) -> Result<(), GeometryError> {
        let scales = [
            ("lat_scale", self.lat_scale),
            ("long_scale", self.long_scale),
            ("height_scale", self.height_scale),
            ("line_scale", self.line_scale),
            ("samp_scale", self.samp_scale),
        ];
        for (name, s) in scales {
            if !(s > 0.0 && s.is_finite()) {
                return Err(GeometryError::InvalidRpc(format!("{name} must be positive, got {s}")));
            }
        }
        if self.line_den_coeff[0] != 1.0 || self.samp_den_coeff[0] != 1.0 {
            return Err(GeometryError::InvalidRpc("denominator constant terms must be 1".into()));
        }
        let all = self
            .line_num_coeff
            .iter()
            .chain(&self.line_den_coeff)
            .chain(&self.samp_num_coeff)
            .chain(&self.samp_den_coeff);
        if all.into_iter().any(|c| !c.is_finite()) {
            return Err(GeometryError::InvalidRpc("non-finite coefficient".into()));
        }
        Ok(())
    }

    pub fn normalize(&self, geo: &Geodetic) -> [f64; 3] {
        [
            (geo.lon - self.long_off) / self.long_scale,
            (geo.lat - self.lat_off) / self.lat_scale,
            (geo.height - self.height_off) / self.height_scale,
        ]
    }
}

/// Project a geodetic point to a pixel `(row, col)`.
pub fn rpc_project(model: &RpcModel, geo: &Geodetic) -> Result<Pixel, GeometryError> {
    let n = model.normalize(geo);
    if n.iter().any(|v| !(v.abs() <= DOMAIN_LIMIT)) {
        return Err(GeometryError::Domain(n));
    }
    let m = rpc_monomials(n[0], n[1], n[2]);
    let line_den = dot(&model.line_den_coeff, &m);
    let samp_den = dot(&model.samp_den_coeff, &m);
    for den in [line_den, samp_den] {
        if den.abs() < MIN_DENOMINATOR {
            return Err(GeometryError::SingularEvaluation(den));
        }
    }
    let line = dot(&model.line_num_coeff, &m) / line_den;
    let samp = dot(&model.samp_num_coeff, &m) / samp_den;
    Ok(Pixel::new(line * model.line_scale + model.line_off, samp * model.samp_scale + model.samp_off))
}

#[cfg(test)]
mod tests {
    use super::*;

    // Term-by-term evaluation written out from the monomial table.
    fn straight_line(c: &[f64; RPC_TERMS], l: f64, p: f64, h: f64) -> f64 {
        c[0] + c[1] * l
            + c[2] * p
            + c[3] * h
            + c[4] * l * p
            + c[5] * l * h
            + c[6] * p * h
            + c[7] * l.powi(2)
            + c[8] * p.powi(2)
            + c[9] * h.powi(2)
            + c[10] * p * l * h
            + c[11] * l.powi(3)
            + c[12] * l * p.powi(2)
            + c[13] * l * h.powi(2)
            + c[14] * l.powi(2) * p
            + c[15] * p.powi(3)
            + c[16] * p * h.powi(2)
            + c[17] * l.powi(2) * h
            + c[18] * p.powi(2) * h
            + c[19] * h.powi(3)
    }

    fn curved_fixture() -> RpcModel {
        let mut m = RpcModel::constant(5000.0, 7000.0);
        m.lat_off = 30.31;
        m.lat_scale = 0.05;
        m.long_off = -81.66;
        m.long_scale = 0.06;
        m.height_off = 20.0;
        m.height_scale = 400.0;
        m.line_scale = 5000.0;
        m.samp_scale = 7000.0;
        m.line_num_coeff = [
            0.0012, -0.0071, -1.0031, 0.0213, 0.0004, -0.0002, 0.0011, 0.0021, -0.0017, 0.0003, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        m.samp_num_coeff = [
            -0.0009, 1.0012, 0.0033, -0.0402, -0.0013, 0.0007, -0.0005, -0.0019, 0.0024, -0.0001, 0.0, 0.0, 0.0, 0.0,
            0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
        ];
        m.line_den_coeff[1] = 0.0011;
        m.line_den_coeff[3] = -0.0004;
        m.samp_den_coeff[2] = 0.0008;
        m
    }

    #[test]
    fn center_of_constant_model_is_the_offset() {
        let m = RpcModel::constant(123.0, 456.0);
        let px = rpc_project(&m, &Geodetic { lat: 0.0, lon: 0.0, height: 0.0 }).unwrap();
        assert_eq!(px, Pixel::new(123.0, 456.0));
    }

    #[test]
    fn matches_straight_line_evaluator_on_grid() {
        let m = curved_fixture();
        m.validate().unwrap();
        let pts = [(-1.0, -1.0, -1.0), (-0.5, 0.3, 0.1), (0.0, 0.0, 0.0), (0.7, -0.2, 0.9), (1.2, 1.1, -0.8)];
        for (l, p, h) in pts {
            let geo = Geodetic {
                lat: m.lat_off + p * m.lat_scale,
                lon: m.long_off + l * m.long_scale,
                height: m.height_off + h * m.height_scale,
            };
            let got = rpc_project(&m, &geo).unwrap();
            let n = m.normalize(&geo);
            let line = straight_line(&m.line_num_coeff, n[0], n[1], n[2])
                / straight_line(&m.line_den_coeff, n[0], n[1], n[2]);
            let samp = straight_line(&m.samp_num_coeff, n[0], n[1], n[2])
                / straight_line(&m.samp_den_coeff, n[0], n[1], n[2]);
            let want = Pixel::new(line * m.line_scale + m.line_off, samp * m.samp_scale + m.samp_off);
            assert!((got.row - want.row).abs() < 1e-9 && (got.col - want.col).abs() < 1e-9, "{got:?} {want:?}");
        }
    }

    #[test]
    fn out_of_domain_is_rejected() {
        let m = curved_fixture();
        let geo = Geodetic { lat: m.lat_off + 2.0 * m.lat_scale, lon: m.long_off, height: m.height_off };
        assert!(matches!(rpc_project(&m, &geo), Err(GeometryError::Domain(_))));
    }

    #[test]
    fn vanishing_denominator_is_singular() {
        let mut m = RpcModel::constant(0.0, 0.0);
        m.line_den_coeff[1] = -1.0; // 1 - L vanishes at L = 1
        let geo = Geodetic { lat: 0.0, lon: 1.0, height: 0.0 };
        assert!(matches!(rpc_project(&m, &geo), Err(GeometryError::SingularEvaluation(_))));
    }

    #[test]
    fn validation_catches_bad_scales_and_denominators() {
        let mut m = RpcModel::constant(0.0, 0.0);
        m.height_scale = 0.0;
        assert!(m.validate().is_err());
        let mut m = RpcModel::constant(0.0, 0.0);
        m.samp_den_coeff[0] = 2.0;
        assert!(m.validate().is_err());
    }

    #[test]
    fn json_round_trip_keeps_field_names() {
        let m = curved_fixture();
        let s = serde_json::to_string(&m).unwrap();
        assert!(s.contains("\"line_num_coeff\"") && s.contains("\"long_off\""));
        let back: RpcModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
    }
}
