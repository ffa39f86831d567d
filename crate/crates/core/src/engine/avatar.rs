use crate::color::{ColorModel, ColorTrain, ColorVars};
use crate::error::Result;
use crate::math::Vec3;
use crate::mesh::{triangle_frames, BlendMesh, TriangleFrame};
use crate::raster::{render_global, view_dirs, Camera, RenderOutput, RenderSettings};
use crate::splats::{to_global, GlobalSplats, RiggedGaussianSet};
use crate::tensor::Tape;

/// A rigged splat avatar: mesh, splats bound to its faces and the color network.
#[derive(Clone, Debug, PartialEq)]
pub struct Avatar {
    pub mesh: BlendMesh,
    pub set: RiggedGaussianSet,
    pub color: ColorModel,
}

/// One posed frame ready for rendering.
pub struct Posed {
    pub frames: Vec<TriangleFrame>,
    pub global: GlobalSplats,
}

impl Avatar {
    /// Poses the splats for expression `psi` plus optional per-vertex offsets.
    pub fn pose(&self, psi: &[f64], offsets: Option<&[Vec3]>) -> Result<Posed> {
        let verts = self.mesh.evaluate(psi, offsets)?;
        let frames = triangle_frames(&verts, &self.mesh.faces)?;
        let global = to_global(&self.set, &frames);
        Ok(Posed { frames, global })
    }

    /// Splat colors seen from `cam`; `color_psi` conditions the color network.
    pub fn colors(&self, posed: &Posed, color_psi: &[f64], cam: &Camera) -> Result<Vec<Vec3>> {
        match &self.set.static_rgb {
            Some(rgb) => Ok(rgb.clone()),
            None => self.color.colors(color_psi, &self.set.latent, &view_dirs(&posed.global, cam)),
        }
    }

    /// Records the color evaluation on `tape` for training.
    pub fn record_colors(&self, tape: &mut Tape, posed: &Posed, color_psi: &[f64], cam: &Camera, train: ColorTrain) -> Result<ColorVars> {
        self.color.record(tape, color_psi, &self.set.latent, &view_dirs(&posed.global, cam), train)
    }

    pub fn render(&self, psi: &[f64], cam: &Camera, settings: &RenderSettings) -> Result<RenderOutput> {
        let posed = self.pose(psi, None)?;
        let colors = self.colors(&posed, psi, cam)?;
        render_global(&posed.global, &colors, cam, settings)
    }
}
