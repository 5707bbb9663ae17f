use serde::{Deserialize, Serialize};

use super::{ChannelRole, Grid3, LabelMask, LabelScheme, PatchStack};
use crate::error::{invalid, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    ImageOnly,
    /// `[image, image, prior]`.
    DupPlusPrior,
}

/// Prior channel values: gland masks are binarised, zones map PZ to 0.5 and TZ to 1.0.
pub fn encode_prior(mask: &LabelMask) -> Grid3<f64> {
    match mask.scheme {
        LabelScheme::Gland => mask.grid.map(|v| f64::from(u8::from(v != 0))),
        LabelScheme::Zones => mask.grid.map(|v| match v {
            LabelScheme::PZ => 0.5,
            LabelScheme::TZ => 1.0,
            _ => 0.0,
        }),
    }
}

/// Build the classifier input from a single-channel image patch and an optional prior
/// cropped to the same window.
pub fn assemble_channels(image: &PatchStack, prior: Option<&LabelMask>, mode: ChannelMode) -> Result<PatchStack> {
    let img = image.image_channel().clone();
    match mode {
        ChannelMode::ImageOnly => PatchStack::new(vec![img], vec![ChannelRole::Image], image.spacing, image.window_origin),
        ChannelMode::DupPlusPrior => {
            let prior = prior.ok_or_else(|| invalid("dup_plus_prior needs a prior mask"))?;
            if prior.dims() != image.dims() {
                return Err(Error::Geometry(format!(
                    "prior dims {:?} vs patch dims {:?}",
                    prior.dims(),
                    image.dims()
                )));
            }
            if !prior.geometry.spacing.iter().zip(&image.spacing).all(|(a, b)| (a - b).abs() <= 1e-6 * a.max(1.0)) {
                return Err(Error::Geometry(format!(
                    "prior spacing {:?} vs patch spacing {:?}",
                    prior.geometry.spacing, image.spacing
                )));
            }
            PatchStack::new(
                vec![img.clone(), img, encode_prior(prior)],
                vec![ChannelRole::Image, ChannelRole::Image, ChannelRole::Prior],
                image.spacing,
                image.window_origin,
            )
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imaging::Geometry;

    fn image(dims: [usize; 3]) -> PatchStack {
        PatchStack::new(vec![Grid3::filled(dims, 2.0)], vec![ChannelRole::Image], [1.0; 3], [0; 3]).unwrap()
    }

    #[test]
    fn dup_plus_prior_layout() {
        let geom = Geometry::with_spacing([1.0; 3]).unwrap();
        let mask = LabelMask::new(Grid3::filled([2, 2, 2], 2), LabelScheme::Zones, geom).unwrap();
        let p = assemble_channels(&image([2, 2, 2]), Some(&mask.to_gland()), ChannelMode::DupPlusPrior).unwrap();
        assert_eq!(p.num_channels(), 3);
        assert_eq!(p.roles(), &[ChannelRole::Image, ChannelRole::Image, ChannelRole::Prior]);
        assert!(p.channel(2).data().iter().all(|&v| v == 1.0));
        let z = assemble_channels(&image([2, 2, 2]), Some(&mask), ChannelMode::DupPlusPrior).unwrap();
        assert!(z.channel(2).data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn image_only_and_errors() {
        assert_eq!(assemble_channels(&image([2, 2, 2]), None, ChannelMode::ImageOnly).unwrap().num_channels(), 1);
        assert!(assemble_channels(&image([2, 2, 2]), None, ChannelMode::DupPlusPrior).is_err());
        let geom = Geometry::with_spacing([1.0; 3]).unwrap();
        let wrong = LabelMask::new(Grid3::filled([3, 2, 2], 1), LabelScheme::Gland, geom).unwrap();
        assert!(matches!(
            assemble_channels(&image([2, 2, 2]), Some(&wrong), ChannelMode::DupPlusPrior),
            Err(Error::Geometry(_))
        ));
    }
}
