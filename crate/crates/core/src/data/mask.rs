//! Occlusion masks over the 48×48 grid.

use std::fmt;
use std::str::FromStr;

use super::fer::Dataset;
use super::image::{GrayImage, HEIGHT, PIXELS, WIDTH};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum Region {
    /// Half-open rectangle `[top, bottom) × [left, right)`.
    Rect {
        top: usize,
        left: usize,
        bottom: usize,
        right: usize,
    },
    /// Polygon in (x = column, y = row) pixel coordinates; a pixel is inside
    /// when its centre is, under the even-odd rule.
    Polygon(Vec<(f64, f64)>),
    /// Explicit membership, one flag per pixel in row-major order.
    Pixels(Vec<bool>),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Fill {
    Value(f64),
    /// Mean of the pixels left unmasked (whole-image mean when nothing is left).
    Mean,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MaskSpec {
    pub region: Region,
    pub fill: Fill,
}

impl Region {
    pub fn lower_half() -> Region {
        Region::Rect {
            top: HEIGHT / 2,
            left: 0,
            bottom: HEIGHT,
            right: WIDTH,
        }
    }

    pub fn full() -> Region {
        Region::Rect {
            top: 0,
            left: 0,
            bottom: HEIGHT,
            right: WIDTH,
        }
    }

    pub fn empty() -> Region {
        Region::Pixels(vec![false; PIXELS])
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            Region::Rect {
                top,
                left,
                bottom,
                right,
            } => {
                if top > bottom || left > right || *bottom > HEIGHT || *right > WIDTH {
                    return Err(Error::Mask(format!(
                        "rectangle rows {top}..{bottom}, cols {left}..{right} is not inside the {HEIGHT}x{WIDTH} grid"
                    )));
                }
            }
            Region::Polygon(points) => {
                if points.len() < 3 {
                    return Err(Error::Mask("polygon needs at least 3 vertices".into()));
                }
                if let Some((x, y)) = points.iter().find(|(x, y)| {
                    !(0.0..=WIDTH as f64).contains(x) || !(0.0..=HEIGHT as f64).contains(y)
                }) {
                    return Err(Error::Mask(format!("polygon vertex ({x}, {y}) lies outside the grid")));
                }
            }
            Region::Pixels(flags) => {
                if flags.len() != PIXELS {
                    return Err(Error::Mask(format!(
                        "pixel region has {} flags, expected {PIXELS}",
                        flags.len()
                    )));
                }
            }
        }
        Ok(())
    }

    /// Row-major membership flags.
    pub fn membership(&self) -> Result<Vec<bool>> {
        self.validate()?;
        Ok(match self {
            Region::Rect {
                top,
                left,
                bottom,
                right,
            } => (0..PIXELS)
                .map(|p| {
                    let (r, c) = (p / WIDTH, p % WIDTH);
                    (*top..*bottom).contains(&r) && (*left..*right).contains(&c)
                })
                .collect(),
            Region::Polygon(points) => (0..PIXELS)
                .map(|p| {
                    let (r, c) = (p / WIDTH, p % WIDTH);
                    point_in_polygon(c as f64 + 0.5, r as f64 + 0.5, points)
                })
                .collect(),
            Region::Pixels(flags) => flags.clone(),
        })
    }
}

fn point_in_polygon(x: f64, y: f64, poly: &[(f64, f64)]) -> bool {
    let mut inside = false;
    let mut j = poly.len() - 1;
    for i in 0..poly.len() {
        let (xi, yi) = poly[i];
        let (xj, yj) = poly[j];
        if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
            inside = !inside;
        }
        j = i;
    }
    inside
}

impl MaskSpec {
    pub fn new(region: Region, fill: Fill) -> Self {
        MaskSpec { region, fill }
    }

    /// Lower half of the face (rows 24–47) filled with the unmasked mean.
    pub fn lower_half() -> Self {
        MaskSpec::new(Region::lower_half(), Fill::Mean)
    }

    pub fn validate(&self) -> Result<()> {
        self.region.validate()?;
        if let Fill::Value(v) = self.fill {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Mask(format!("fill value {v} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Sets every pixel inside the region to the fill value; pixels outside are untouched.
pub fn apply_mask(image: &GrayImage, spec: &MaskSpec) -> Result<GrayImage> {
    spec.validate()?;
    let inside = spec.region.membership()?;
    Ok(apply_membership(image, &inside, spec.fill))
}

pub(crate) fn apply_membership(image: &GrayImage, inside: &[bool], fill: Fill) -> GrayImage {
    let value = match fill {
        Fill::Value(v) => v,
        Fill::Mean => {
            let (sum, n) = image
                .pixels()
                .iter()
                .zip(inside)
                .filter(|(_, &m)| !m)
                .fold((0.0, 0usize), |(s, n), (v, _)| (s + v, n + 1));
            if n == 0 {
                image.mean()
            } else {
                sum / n as f64
            }
        }
    };
    image.map(|i, v| if inside[i] { value } else { v })
}

/// Applies one mask to every image, keeping labels and split membership.
pub fn generate_maskfer(dataset: &Dataset, spec: &MaskSpec) -> Result<Dataset> {
    spec.validate()?;
    let inside = spec.region.membership()?;
    let examples = dataset
        .examples
        .iter()
        .map(|e| {
            let mut e = e.clone();
            e.image = apply_membership(&e.image, &inside, spec.fill);
            e
        })
        .collect();
    Ok(Dataset { examples })
}

impl fmt::Display for Fill {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Fill::Value(v) => write!(f, "{v}"),
            Fill::Mean => f.write_str("mean"),
        }
    }
}

impl FromStr for Fill {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s == "mean" {
            return Ok(Fill::Mean);
        }
        let v: f64 = s
            .parse()
            .map_err(|_| Error::config("fill", format!("expected `mean` or a number, got `{s}`")))?;
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::config("fill", format!("{v} outside [0, 1]")));
        }
        Ok(Fill::Value(v))
    }
}

impl fmt::Display for Region {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            r if *r == Region::lower_half() => f.write_str("lower-half"),
            r if *r == Region::full() => f.write_str("full"),
            Region::Rect {
                top,
                left,
                bottom,
                right,
            } => write!(f, "rect:{top},{left},{bottom},{right}"),
            Region::Polygon(points) => {
                let parts: Vec<String> = points.iter().map(|(x, y)| format!("{x} {y}")).collect();
                write!(f, "poly:{}", parts.join(";"))
            }
            Region::Pixels(flags) => write!(f, "pixels:{}", flags.iter().filter(|&&b| b).count()),
        }
    }
}

/// Accepts `lower-half`, `full`, `none`, `rows:A-B` (inclusive),
/// `rect:top,left,bottom,right` (half-open) and `poly:x y;x y;...`.
impl FromStr for Region {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = |m: String| Error::config("region", m);
        let num = |t: &str| {
            t.trim()
                .parse::<usize>()
                .map_err(|_| bad(format!("`{t}` is not a non-negative integer")))
        };
        let region = match s {
            "lower-half" => Region::lower_half(),
            "full" => Region::full(),
            "none" => Region::empty(),
            _ => {
                if let Some(rest) = s.strip_prefix("rows:") {
                    let (a, b) = rest
                        .split_once('-')
                        .ok_or_else(|| bad(format!("expected rows:A-B, got `{s}`")))?;
                    Region::Rect {
                        top: num(a)?,
                        left: 0,
                        bottom: num(b)? + 1,
                        right: WIDTH,
                    }
                } else if let Some(rest) = s.strip_prefix("rect:") {
                    let v = rest.split(',').map(num).collect::<Result<Vec<_>>>()?;
                    let [top, left, bottom, right] = v[..] else {
                        return Err(bad(format!("expected rect:top,left,bottom,right, got `{s}`")));
                    };
                    Region::Rect {
                        top,
                        left,
                        bottom,
                        right,
                    }
                } else if let Some(rest) = s.strip_prefix("poly:") {
                    let points = rest
                        .split(';')
                        .map(|pair| {
                            let mut it = pair.split_whitespace().map(str::parse::<f64>);
                            match (it.next(), it.next(), it.next()) {
                                (Some(Ok(x)), Some(Ok(y)), None) => Ok((x, y)),
                                _ => Err(bad(format!("bad polygon vertex `{pair}`"))),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    Region::Polygon(points)
                } else {
                    return Err(bad(format!("unknown region `{s}`")));
                }
            }
        };
        region.validate().map_err(|e| bad(e.to_string()))?;
        Ok(region)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::fer::{LabeledExample, Split};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn noisy(seed: u64) -> GrayImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        GrayImage::new((0..PIXELS).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn full_region_zero_fill() {
        let out = apply_mask(&noisy(1), &MaskSpec::new(Region::full(), Fill::Value(0.0))).unwrap();
        assert!(out.pixels().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_region_is_identity() {
        let img = noisy(2);
        let out = apply_mask(&img, &MaskSpec::new(Region::empty(), Fill::Mean)).unwrap();
        assert_eq!(out, img);
        let zero_rect = Region::Rect {
            top: 5,
            left: 5,
            bottom: 5,
            right: 30,
        };
        assert_eq!(apply_mask(&img, &MaskSpec::new(zero_rect, Fill::Value(0.0))).unwrap(), img);
    }

    #[test]
    fn lower_rows_masked() {
        let img = noisy(3).map(|_, v| v * 0.5 + 0.25);
        let spec = MaskSpec::new("rows:24-47".parse().unwrap(), Fill::Value(0.0));
        let out = apply_mask(&img, &spec).unwrap();
        let zeroed = out.pixels().iter().filter(|&&v| v == 0.0).count();
        assert_eq!(zeroed, 1152);
        assert_eq!(&out.pixels()[..24 * WIDTH], &img.pixels()[..24 * WIDTH]);
        assert_eq!(spec.region, Region::lower_half());
    }

    #[test]
    fn mean_fill_uses_unmasked_pixels() {
        let img = GrayImage::new((0..PIXELS).map(|p| if p < PIXELS / 2 { 0.2 } else { 0.9 }).collect()).unwrap();
        let out = apply_mask(&img, &MaskSpec::lower_half()).unwrap();
        assert!(out.pixels().iter().all(|&v| (v - 0.2).abs() < 1e-12));
    }

    #[test]
    fn idempotent_for_constant_fill() {
        let img = noisy(4);
        let spec = MaskSpec::new("rect:3,7,30,41".parse().unwrap(), Fill::Value(0.35));
        let once = apply_mask(&img, &spec).unwrap();
        assert_eq!(apply_mask(&once, &spec).unwrap(), once);
    }

    #[test]
    fn rejects_out_of_grid_regions() {
        let r = Region::Rect {
            top: 0,
            left: 0,
            bottom: 49,
            right: 10,
        };
        assert!(matches!(
            apply_mask(&noisy(5), &MaskSpec::new(r, Fill::Mean)),
            Err(Error::Mask(_))
        ));
        assert!("rect:0,0,10".parse::<Region>().is_err());
        assert!("poly:0 0;60 0;0 10".parse::<Region>().is_err());
        assert!("0.5".parse::<Fill>().is_ok());
        assert!("1.5".parse::<Fill>().is_err());
    }

    #[test]
    fn polygon_membership() {
        let tri: Region = "poly:0 0;48 0;0 48".parse().unwrap();
        let inside = tri.membership().unwrap();
        let count = inside.iter().filter(|&&b| b).count();
        // Pixel centres strictly below the anti-diagonal: 47*48/2.
        assert_eq!(count, 47 * 48 / 2);
        assert!(inside[0]);
        assert!(!inside[PIXELS - 1]);
    }

    #[test]
    fn maskfer_preserves_labels_and_splits() {
        let ds = Dataset::new(
            (0..21)
                .map(|i| LabeledExample {
                    image: noisy(i as u64),
                    label: i % 7,
                    split: Split::ALL[i % 3],
                })
                .collect(),
        );
        let masked = generate_maskfer(&ds, &MaskSpec::lower_half()).unwrap();
        assert_eq!(masked.class_distribution(), ds.class_distribution());
        let ident = generate_maskfer(&ds, &MaskSpec::new(Region::empty(), Fill::Mean)).unwrap();
        assert_eq!(ident, ds);
    }
}
