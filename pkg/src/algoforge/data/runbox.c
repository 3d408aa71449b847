/*
 * runbox: run one program under resource limits and report its usage.
 *
 * usage: runbox CPU_S AS_BYTES FSIZE_BYTES STACK_BYTES NPROC UID GID WALL_MS IN OUT ERR -- PROG [ARGS...]
 *
 * A zero limit is left unset; UID/GID of -1 keep the current identity.
 * The program is forked from this small process (not from the caller), so
 * ru_maxrss reflects the program itself. One report line goes to stdout.
 */
#define _GNU_SOURCE
#include <errno.h>
#include <fcntl.h>
#include <grp.h>
#include <signal.h>
#include <stdio.h>
#include <stdlib.h>
#include <string.h>
#include <sys/resource.h>
#include <sys/time.h>
#include <sys/types.h>
#include <sys/wait.h>
#include <time.h>
#include <unistd.h>

static double now(void) {
    struct timespec ts;
    clock_gettime(CLOCK_MONOTONIC, &ts);
    return ts.tv_sec + ts.tv_nsec / 1e9;
}

static void fail_child(int pipefd, int stage) {
    int msg[2] = {stage, errno};
    if (write(pipefd, msg, sizeof msg) < 0) { /* nothing left to do */ }
    _exit(127);
}

static int set_limit(int resource, unsigned long long value) {
    struct rlimit rl;
    if (value == 0) return 0;
    rl.rlim_cur = value;
    rl.rlim_max = value;
    return setrlimit(resource, &rl);
}

int main(int argc, char **argv) {
    if (argc < 14 || strcmp(argv[12], "--") != 0) {
        fprintf(stderr, "usage: runbox CPU_S AS FSIZE STACK NPROC UID GID WALL_MS IN OUT ERR -- PROG [ARGS...]\n");
        return 2;
    }
    unsigned long long cpu = strtoull(argv[1], NULL, 10);
    unsigned long long as = strtoull(argv[2], NULL, 10);
    unsigned long long fsize = strtoull(argv[3], NULL, 10);
    unsigned long long stack = strtoull(argv[4], NULL, 10);
    unsigned long long nproc = strtoull(argv[5], NULL, 10);
    long uid = strtol(argv[6], NULL, 10);
    long gid = strtol(argv[7], NULL, 10);
    long wall_ms = strtol(argv[8], NULL, 10);

    int pipefd[2];
    if (pipe2(pipefd, O_CLOEXEC) != 0) {
        perror("pipe2");
        return 3;
    }

    double start = now();
    pid_t pid = fork();
    if (pid < 0) {
        perror("fork");
        return 3;
    }
    if (pid == 0) {
        close(pipefd[0]);
        setpgid(0, 0);
        int in = open(argv[9], O_RDONLY);
        if (in < 0) fail_child(pipefd[1], 1);
        int out = open(argv[10], O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (out < 0) fail_child(pipefd[1], 2);
        int err = open(argv[11], O_WRONLY | O_CREAT | O_TRUNC, 0644);
        if (err < 0) fail_child(pipefd[1], 3);
        if (dup2(in, 0) < 0 || dup2(out, 1) < 0 || dup2(err, 2) < 0) fail_child(pipefd[1], 4);
        close(in);
        close(out);
        close(err);
        if (set_limit(RLIMIT_CPU, cpu) || set_limit(RLIMIT_AS, as) || set_limit(RLIMIT_FSIZE, fsize) ||
            set_limit(RLIMIT_STACK, stack))
            fail_child(pipefd[1], 5);
        struct rlimit nocore = {0, 0};
        setrlimit(RLIMIT_CORE, &nocore);
        if (gid >= 0) {
            if (setgroups(0, NULL) != 0 || setgid((gid_t)gid) != 0) fail_child(pipefd[1], 6);
        }
        if (uid >= 0) {
            if (nproc && set_limit(RLIMIT_NPROC, nproc)) fail_child(pipefd[1], 5);
            if (setuid((uid_t)uid) != 0) fail_child(pipefd[1], 7);
        }
        execv(argv[13], &argv[13]);
        fail_child(pipefd[1], 8);
    }

    close(pipefd[1]);
    int status = 0;
    int timed_out = 0;
    struct rusage ru;
    memset(&ru, 0, sizeof ru);
    double deadline = start + wall_ms / 1000.0;
    for (;;) {
        pid_t r = wait4(pid, &status, WNOHANG, &ru);
        if (r == pid) break;
        if (r < 0 && errno != EINTR) {
            perror("wait4");
            return 3;
        }
        if (wall_ms > 0 && now() >= deadline) {
            timed_out = 1;
            kill(-pid, SIGKILL);
            kill(pid, SIGKILL);
            while (wait4(pid, &status, 0, &ru) < 0 && errno == EINTR) {}
            break;
        }
        struct timespec nap = {0, 1000000};
        nanosleep(&nap, NULL);
    }
    double wall = now() - start;
    /* Reap anything left in the process group. */
    kill(-pid, SIGKILL);

    int msg[2] = {0, 0};
    ssize_t got = read(pipefd[0], msg, sizeof msg);
    double cpu_used = ru.ru_utime.tv_sec + ru.ru_utime.tv_usec / 1e6 + ru.ru_stime.tv_sec + ru.ru_stime.tv_usec / 1e6;
    printf("exited=%d code=%d signal=%d wall=%.6f cpu=%.6f maxrss_kb=%ld timed_out=%d setup_stage=%d setup_errno=%d\n",
           WIFEXITED(status) ? 1 : 0, WIFEXITED(status) ? WEXITSTATUS(status) : -1,
           WIFSIGNALED(status) ? WTERMSIG(status) : 0, wall, cpu_used, ru.ru_maxrss, timed_out,
           got == (ssize_t)sizeof msg ? msg[0] : 0, got == (ssize_t)sizeof msg ? msg[1] : 0);
    return 0;
}
