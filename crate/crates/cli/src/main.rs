fn main() {
    println!("msc");
}
