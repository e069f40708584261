//! Central finite-difference checks of every engine op and of the composite
//! objective on the toy model.

use gmic::gradcheck;
use gmic::RunConfig;

fn main() -> gmic::Result<()> {
    let rows = gradcheck::full_suite(&RunConfig::toy(), 5, 40)?;
    print!("{}", gradcheck::format_table(&rows));
    Ok(())
}
