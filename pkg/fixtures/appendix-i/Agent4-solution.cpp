#include <bits/stdc++.h>
using namespace std;

int main() {
    ios::sync_with_stdio(false);
    cin.tie(0);
    
    long long n, m;
    cin >> n >> m;
    
    long long max_x_plus_y_L = LLONG_MIN, min_x_plus_y_L = LLONG_MAX;
    long long max_x_minus_y_L = LLONG_MIN, min_x_minus_y_L = LLONG_MAX;
    long long max_x_plus_y_R = LLONG_MIN, min_x_plus_y_R = LLONG_MAX;
    long long max_x_minus_y_R = LLONG_MIN, min_x_minus_y_R = LLONG_MAX;
    
    // Process L's vectors
    for (long long i = 0; i < n; i++) {
        long long a, b;
        cin >> a >> b;
        long long x_plus_y = a + b;
        long long x_minus_y = a - b;
        max_x_plus_y_L = max(max_x_plus_y_L, x_plus_y);
        min_x_plus_y_L = min(min_x_plus_y_L, x_plus_y);
        max_x_minus_y_L = max(max_x_minus_y_L, x_minus_y);
        min_x_minus_y_L = min(min_x_minus_y_L, x_minus_y);
    }
    
    // Process R's vectors
    for (long long i = 0; i < m; i++) {
        long long c, d;
        cin >> c >> d;
        long long x_plus_y = c + d;
        long long x_minus_y = c - d;
        max_x_plus_y_R = max(max_x_plus_y_R, x_plus_y);
        min_x_plus_y_R = min(min_x_plus_y_R, x_plus_y);
        max_x_minus_y_R = max(max_x_minus_y_R, x_minus_y);
        min_x_minus_y_R = min(min_x_minus_y_R, x_minus_y);
    }
    
    // Compute maximum Manhattan distance
    long long dist1 = max_x_plus_y_L - min_x_plus_y_R;
    long long dist2 = max_x_minus_y_L - min_x_minus_y_R;
    long long result = max(dist1, dist2);
    
    cout << result << "\n";
    
    return 0;
}
