fn main() {
    println!("fine");
}
