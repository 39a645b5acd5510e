#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatternKind {
    Checker,
    HStripes,
    VStripes,
    Diagonal,
}

impl PatternKind {
    pub const ALL: [PatternKind; 4] = [
        PatternKind::Checker,
        PatternKind::HStripes,
        PatternKind::VStripes,
        PatternKind::Diagonal,
    ];
}

/// Static background plus the anchor where the figure's root is placed.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub id: String,
    pub pattern: PatternKind,
    pub color_a: [f32; 3],
    pub color_b: [f32; 3],
    /// Pattern period in pixels (≥ 1).
    pub period: u32,
    /// Pixel position (x, y) of the figure root at zero root translation.
    pub camera_offset: [i32; 2],
}

impl SceneSpec {
    pub fn background_pixel(&self, row: usize, col: usize) -> [f32; 3] {
        let p = self.period.max(1) as usize;
        let first = match self.pattern {
            PatternKind::Checker => ((row / p) + (col / p)) % 2 == 0,
            PatternKind::HStripes => (row / p) % 2 == 0,
            PatternKind::VStripes => (col / p) % 2 == 0,
            PatternKind::Diagonal => ((row + col) / p) % 2 == 0,
        };
        if first {
            self.color_a
        } else {
            self.color_b
        }
    }
}
