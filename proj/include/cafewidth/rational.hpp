#pragma once

#include <cstdint>
#include <compare>
#include <numeric>
#include <stdexcept>
#include <string>
#include <string_view>

#include <nlohmann/json.hpp>

namespace cafewidth {

/// Exact fraction with a positive denominator, always kept in lowest terms.
class Rational {
 public:
  constexpr Rational() = default;
  constexpr Rational(std::int64_t n) : num_(n), den_(1) {}  // NOLINT: implicit from integers
  Rational(std::int64_t n, std::int64_t d) : num_(n), den_(d) { normalize(); }

  std::int64_t num() const { return num_; }
  std::int64_t den() const { return den_; }

  double to_double() const { return static_cast<double>(num_) / static_cast<double>(den_); }

  friend Rational operator+(const Rational& a, const Rational& b) {
    return from_wide(static_cast<__int128>(a.num_) * b.den_ + static_cast<__int128>(b.num_) * a.den_,
                     static_cast<__int128>(a.den_) * b.den_);
  }
  friend Rational operator-(const Rational& a, const Rational& b) {
    return from_wide(static_cast<__int128>(a.num_) * b.den_ - static_cast<__int128>(b.num_) * a.den_,
                     static_cast<__int128>(a.den_) * b.den_);
  }
  friend Rational operator*(const Rational& a, const Rational& b) {
    return from_wide(static_cast<__int128>(a.num_) * b.num_, static_cast<__int128>(a.den_) * b.den_);
  }
  friend Rational operator/(const Rational& a, const Rational& b) {
    if (b.num_ == 0) throw std::domain_error("rational division by zero");
    return from_wide(static_cast<__int128>(a.num_) * b.den_, static_cast<__int128>(a.den_) * b.num_);
  }
  friend bool operator==(const Rational& a, const Rational& b) {
    return a.num_ == b.num_ && a.den_ == b.den_;
  }
  friend std::strong_ordering operator<=>(const Rational& a, const Rational& b) {
    const __int128 lhs = static_cast<__int128>(a.num_) * b.den_;
    const __int128 rhs = static_cast<__int128>(b.num_) * a.den_;
    if (lhs < rhs) return std::strong_ordering::less;
    if (lhs > rhs) return std::strong_ordering::greater;
    return std::strong_ordering::equal;
  }

  std::string to_string() const {
    if (den_ == 1) return std::to_string(num_);
    return std::to_string(num_) + "/" + std::to_string(den_);
  }

  /// Accepts "3", "-3/4" or a plain decimal such as "0.25".
  static Rational parse(std::string_view text) {
    auto fail = [&] { throw std::invalid_argument("not a rational: '" + std::string(text) + "'"); };
    if (text.empty()) fail();
    auto parse_int = [&](std::string_view s) -> std::int64_t {
      if (s.empty()) fail();
      std::size_t pos = 0;
      std::int64_t v = 0;
      try {
        v = std::stoll(std::string(s), &pos);
      } catch (const std::exception&) {
        fail();
      }
      if (pos != s.size()) fail();
      return v;
    };
    if (auto slash = text.find('/'); slash != std::string_view::npos) {
      const auto d = parse_int(text.substr(slash + 1));
      if (d == 0) fail();
      return Rational(parse_int(text.substr(0, slash)), d);
    }
    if (auto dot = text.find('.'); dot != std::string_view::npos) {
      std::string_view whole = text.substr(0, dot);
      std::string_view frac = text.substr(dot + 1);
      if (frac.size() > 15 || frac.find_first_not_of("0123456789") != std::string_view::npos) fail();
      const bool negative = !whole.empty() && whole.front() == '-';
      std::int64_t scale = 1;
      for (std::size_t i = 0; i < frac.size(); ++i) scale *= 10;
      const std::int64_t w = (whole.empty() || whole == "-") ? 0 : parse_int(whole);
      const std::int64_t f = frac.empty() ? 0 : parse_int(frac);
      const std::int64_t mag = (w < 0 ? -w : w) * scale + f;
      return Rational(negative ? -mag : mag, scale);
    }
    return Rational(parse_int(text));
  }

 private:
  static Rational from_wide(__int128 n, __int128 d) {
    if (d == 0) throw std::domain_error("rational with zero denominator");
    if (d < 0) {
      n = -n;
      d = -d;
    }
    __int128 a = n < 0 ? -n : n;
    __int128 b = d;
    while (b != 0) {
      const __int128 t = a % b;
      a = b;
      b = t;
    }
    if (a > 1) {
      n /= a;
      d /= a;
    }
    constexpr __int128 lim = INT64_MAX;
    if (n > lim || n < -lim || d > lim) throw std::overflow_error("rational overflow");
    Rational r;
    r.num_ = static_cast<std::int64_t>(n);
    r.den_ = static_cast<std::int64_t>(d);
    return r;
  }

  void normalize() {
    if (den_ == 0) throw std::domain_error("rational with zero denominator");
    if (den_ < 0) {
      num_ = -num_;
      den_ = -den_;
    }
    const std::int64_t g = std::gcd(num_, den_);
    if (g > 1) {
      num_ /= g;
      den_ /= g;
    }
  }

  std::int64_t num_ = 0;
  std::int64_t den_ = 1;
};

inline void to_json(nlohmann::json& j, const Rational& r) { j = r.to_string(); }

inline void from_json(const nlohmann::json& j, Rational& r) {
  if (j.is_number_integer()) {
    r = Rational(j.get<std::int64_t>());
  } else if (j.is_string()) {
    r = Rational::parse(j.get<std::string>());
  } else if (j.is_number_float()) {
    // Shortest round-trip text of the double, then exact decimal parse.
    r = Rational::parse(nlohmann::json(j.get<double>()).dump());
  } else {
    throw std::invalid_argument("rational must be an integer, decimal or \"p/q\" string");
  }
}

}  // namespace cafewidth
